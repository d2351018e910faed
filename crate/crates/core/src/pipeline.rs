//! Coarse-to-fine autoregressive inference over a whole volume.
//!
//! Step `t` resizes the target and every context pair to the step's dims,
//! slides an `I^3` window over them, feeds each window the matching crop of
//! the previous step's (image, prediction) pair as autoregressive context,
//! and stitches the window predictions with trapezoid blending.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{crop_context, resize_context, ArContext, ContextSet};
use crate::error::{invalid, Result};
use crate::registry::{Named, Registry};
use crate::schedule::{ar_crop_for_tile, plan_tiles, ScaleSchedule, TilePlan, DEFAULT_OVERLAP};
use crate::unet::{UNet, UNetConfig, WeightStore};
use crate::volume::{binarize_mask, crop, resample, Interpolation, Shape3, StitchBuffer, Volume, MASK_THRESHOLD};

/// Anything that maps one `I^3` window plus its contexts to a prediction.
pub trait PatchModel: Named + Send + Sync {
    fn patch_edge(&self) -> usize;
    fn predict(&self, x: &Volume, ctx: &ContextSet, ar: &ArContext) -> Result<Volume>;
}

impl Named for UNet {
    fn name(&self) -> &'static str {
        "unet"
    }
}

impl PatchModel for UNet {
    fn patch_edge(&self) -> usize {
        self.config().patch_edge
    }

    fn predict(&self, x: &Volume, ctx: &ContextSet, ar: &ArContext) -> Result<Volume> {
        self.forward(x, ctx, ar)
    }
}

/// Returns the target window unchanged.
#[derive(Debug, Clone, Copy)]
pub struct IdentityStub {
    pub patch_edge: usize,
}

impl Named for IdentityStub {
    fn name(&self) -> &'static str {
        "identity"
    }
}

impl PatchModel for IdentityStub {
    fn patch_edge(&self) -> usize {
        self.patch_edge
    }

    fn predict(&self, x: &Volume, _ctx: &ContextSet, _ar: &ArContext) -> Result<Volume> {
        Ok(x.clone())
    }
}

/// Builds a model from a configuration and (optionally) weights.
pub trait ModelFactory: Named + Send + Sync {
    fn build(&self, cfg: &UNetConfig, weights: Option<Arc<WeightStore>>) -> Result<Arc<dyn PatchModel>>;
}

struct UNetFactory;

impl Named for UNetFactory {
    fn name(&self) -> &'static str {
        "unet"
    }
}

impl ModelFactory for UNetFactory {
    fn build(&self, cfg: &UNetConfig, weights: Option<Arc<WeightStore>>) -> Result<Arc<dyn PatchModel>> {
        let w = weights.ok_or_else(|| crate::Error::Config("the unet model needs a weight file".into()))?;
        Ok(Arc::new(UNet::new(cfg.clone(), w)?))
    }
}

struct IdentityFactory;

impl Named for IdentityFactory {
    fn name(&self) -> &'static str {
        "identity"
    }
}

impl ModelFactory for IdentityFactory {
    fn build(&self, cfg: &UNetConfig, _weights: Option<Arc<WeightStore>>) -> Result<Arc<dyn PatchModel>> {
        cfg.validate()?;
        Ok(Arc::new(IdentityStub { patch_edge: cfg.patch_edge }))
    }
}

pub type ModelRegistry = Registry<dyn ModelFactory>;

pub fn builtin_models() -> ModelRegistry {
    let mut r = ModelRegistry::new("model");
    r.register(Arc::new(UNetFactory)).register(Arc::new(IdentityFactory));
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Segmentation,
    Regression,
}

#[derive(Debug, Clone)]
pub struct InferenceRequest {
    pub target: Volume,
    pub context: ContextSet,
    pub task_kind: TaskKind,
    pub overlap_fraction: f64,
    pub na_icl_enabled: bool,
    /// Shuffles the order in which tiles are stitched.
    pub tile_order_seed: Option<u64>,
    /// Keep every step's stitched prediction in the trace.
    pub keep_intermediates: bool,
}

impl InferenceRequest {
    pub fn new(target: Volume, context: ContextSet, task_kind: TaskKind) -> Self {
        Self {
            target,
            context,
            task_kind,
            overlap_fraction: DEFAULT_OVERLAP,
            na_icl_enabled: true,
            tile_order_seed: None,
            keep_intermediates: false,
        }
    }

    fn validate(&self, model: &dyn PatchModel) -> Result<()> {
        if self.target.channels() != 1 {
            return Err(invalid(format!("target must have one channel, got {}", self.target.channels())));
        }
        if self.context.shape() != self.target.shape() {
            return Err(invalid(format!(
                "context shape {} differs from target shape {}",
                self.context.shape(),
                self.target.shape()
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(invalid(format!("overlap fraction {} outside [0, 1)", self.overlap_fraction)));
        }
        let edge = model.patch_edge();
        if edge < 2 || edge % 2 != 0 {
            return Err(invalid(format!("model patch edge {edge} must be even")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub dims: [usize; 3],
    pub tiles: usize,
    pub tile_ms: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepTrace {
    pub mode: &'static str,
    pub model: &'static str,
    pub patch_edge: usize,
    pub overlap_fraction: f64,
    pub steps: Vec<StepRecord>,
    #[serde(skip)]
    pub intermediates: Vec<Volume>,
}

#[derive(Debug, Clone)]
pub struct InferenceOutput {
    /// Continuous prediction at the target's resolution.
    pub prediction: Volume,
    /// Prediction thresholded at 0.5 (segmentation only).
    pub mask: Option<Volume>,
    pub trace: StepTrace,
}

/// Runs every tile of one step and stitches the results in plan order.
fn run_step(
    model: &dyn PatchModel,
    plan: &TilePlan,
    order: &[usize],
    x: &Volume,
    ctx: &ContextSet,
    ar_for_tile: &(dyn Fn([usize; 3]) -> Result<ArContext> + Sync),
) -> Result<(Volume, Vec<f64>)> {
    let profile = plan.blend_profile();
    let mut buf = StitchBuffer::new(1, plan.dims);
    let mut tile_ms = vec![0.0; plan.len()];
    // Bounded batches keep at most a few window predictions alive at once.
    let batch = (rayon::current_num_threads() * 2).max(1);
    for chunk in order.chunks(batch) {
        let preds: Vec<(Volume, f64)> = chunk
            .par_iter()
            .map(|&tile| {
                let start = Instant::now();
                let region = plan.region(tile);
                let xi = crop(x, region, 0.0);
                let si = crop_context(ctx, region, 0.0);
                let ai = ar_for_tile(plan.origins[tile])?;
                let y = model.predict(&xi, &si, &ai)?;
                if y.channels() != 1 || y.shape() != region.extent {
                    return Err(invalid(format!(
                        "model returned {}x{}, expected 1x{}",
                        y.channels(),
                        y.shape(),
                        region.extent
                    )));
                }
                Ok((y, start.elapsed().as_secs_f64() * 1e3))
            })
            .collect::<Result<_>>()?;
        for (&tile, (y, ms)) in chunk.iter().zip(preds) {
            buf.add(&y, &profile, plan.region(tile))?;
            tile_ms[tile] = ms;
        }
    }
    Ok((buf.finish(), tile_ms))
}

fn tile_order(n: usize, seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(s) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
    order
}

fn resize_to(v: &Volume, dims: Shape3) -> Volume {
    resample(v, dims, Interpolation::Trilinear)
}

fn finish(req: &InferenceRequest, prediction: Volume, trace: StepTrace) -> Result<InferenceOutput> {
    let mask = match req.task_kind {
        TaskKind::Segmentation => Some(binarize_mask(&prediction, MASK_THRESHOLD)?),
        TaskKind::Regression => None,
    };
    Ok(InferenceOutput { prediction, mask, trace })
}

/// Coarse-to-fine inference; falls back to the sliding-window ablation when
/// `na_icl_enabled` is off.
pub fn infer(req: &InferenceRequest, model: &dyn PatchModel) -> Result<InferenceOutput> {
    if !req.na_icl_enabled {
        return infer_ablation_no_naicl(req, model);
    }
    req.validate(model)?;
    let edge = model.patch_edge();
    let schedule = ScaleSchedule::new(req.target.shape(), edge)?;
    let mut trace = new_trace("naicl", model, req);
    let mut prev: Option<(Volume, Volume)> = None;

    for t in 1..=schedule.steps() {
        let dims = schedule.dims(t);
        let x = resize_to(&req.target, dims);
        let ctx = resize_context(&req.context, dims);
        let plan = plan_tiles(dims, edge, req.overlap_fraction)?;
        let prev_ref = prev.as_ref();
        let ar_for_tile = |origin: [usize; 3]| -> Result<ArContext> {
            let Some((px, py)) = prev_ref else {
                return Ok(ArContext::Empty);
            };
            let c = ar_crop_for_tile(origin, edge, px.shape())?;
            let img = resize_to(&crop(px, c.parent_region, 0.0), c.target_extent);
            let pred = resize_to(&crop(py, c.parent_region, 0.0), c.target_extent);
            ArContext::new(img, pred)
        };
        let order = tile_order(plan.len(), req.tile_order_seed);
        let (y, tile_ms) = run_step(model, &plan, &order, &x, &ctx, &ar_for_tile)?;
        trace.steps.push(StepRecord { t, dims: dims.as_array(), tiles: plan.len(), tile_ms });
        if req.keep_intermediates {
            trace.intermediates.push(y.clone());
        }
        prev = Some((x, y));
    }
    let (_, prediction) = prev.expect("at least one step");
    finish(req, prediction, trace)
}

/// Single-scale sliding-window inference with no autoregressive context.
pub fn infer_ablation_no_naicl(req: &InferenceRequest, model: &dyn PatchModel) -> Result<InferenceOutput> {
    req.validate(model)?;
    let dims = req.target.shape();
    let plan = plan_tiles(dims, model.patch_edge(), req.overlap_fraction)?;
    let order = tile_order(plan.len(), req.tile_order_seed);
    let (y, tile_ms) = run_step(model, &plan, &order, &req.target, &req.context, &|_| Ok(ArContext::Empty))?;
    let mut trace = new_trace("sliding-window", model, req);
    trace.steps.push(StepRecord { t: 1, dims: dims.as_array(), tiles: plan.len(), tile_ms });
    if req.keep_intermediates {
        trace.intermediates.push(y.clone());
    }
    finish(req, y, trace)
}

fn new_trace(mode: &'static str, model: &dyn PatchModel, req: &InferenceRequest) -> StepTrace {
    StepTrace {
        mode,
        model: model.name(),
        patch_edge: model.patch_edge(),
        overlap_fraction: req.overlap_fraction,
        steps: Vec::new(),
        intermediates: Vec::new(),
    }
}

/// A whole-volume inference strategy.
pub trait InferenceMode: Named + Send + Sync {
    fn run(&self, req: &InferenceRequest, model: &dyn PatchModel) -> Result<InferenceOutput>;
}

struct NextScale;

impl Named for NextScale {
    fn name(&self) -> &'static str {
        "naicl"
    }
}

impl InferenceMode for NextScale {
    fn run(&self, req: &InferenceRequest, model: &dyn PatchModel) -> Result<InferenceOutput> {
        let mut r = req.clone();
        r.na_icl_enabled = true;
        infer(&r, model)
    }
}

struct SlidingWindow;

impl Named for SlidingWindow {
    fn name(&self) -> &'static str {
        "sliding-window"
    }
}

impl InferenceMode for SlidingWindow {
    fn run(&self, req: &InferenceRequest, model: &dyn PatchModel) -> Result<InferenceOutput> {
        infer_ablation_no_naicl(req, model)
    }
}

pub type ModeRegistry = Registry<dyn InferenceMode>;

pub fn builtin_modes() -> ModeRegistry {
    let mut r = ModeRegistry::new("inference mode");
    r.register(Arc::new(NextScale)).register(Arc::new(SlidingWindow));
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::test_support::random_map;
    use crate::context::ContextPair;
    use crate::unet::seeded_weights;
    use crate::Error;

    fn ctx_for(shape: Shape3, n: usize) -> ContextSet {
        let pairs = (0..n)
            .map(|i| ContextPair::new(random_map(1, shape, 100 + i as u64), random_map(1, shape, 200 + i as u64)).unwrap())
            .collect();
        ContextSet::new(pairs).unwrap()
    }

    fn request(shape: Shape3, overlap: f64) -> InferenceRequest {
        let mut r = InferenceRequest::new(random_map(1, shape, 7), ctx_for(shape, 1), TaskKind::Regression);
        r.overlap_fraction = overlap;
        r
    }

    #[test]
    fn identity_stub_recovers_input() {
        for (shape, edge) in [((20, 13, 9), 8), ((8, 8, 8), 8), ((5, 30, 17), 4), ((33, 2, 16), 8)] {
            let shape = Shape3::new(shape.0, shape.1, shape.2).unwrap();
            let model = IdentityStub { patch_edge: edge };
            let r = request(shape, 0.0);
            let out = infer(&r, &model).unwrap();
            assert_eq!(out.prediction, r.target, "{shape} I={edge}");
            let r = request(shape, 0.25);
            let out = infer(&r, &model).unwrap();
            assert_eq!(out.prediction.shape(), shape);
            assert!(out.prediction.max_abs_diff(&r.target) <= 1e-6);
            let abl = infer_ablation_no_naicl(&r, &model).unwrap();
            assert!(abl.prediction.max_abs_diff(&r.target) <= 1e-6);
        }
    }

    #[test]
    fn trace_follows_schedule() {
        let shape = Shape3::new(75, 50, 30).unwrap();
        let r = request(shape, 0.25);
        let out = infer(&r, &IdentityStub { patch_edge: 16 }).unwrap();
        let s = ScaleSchedule::new(shape, 16).unwrap();
        assert_eq!(out.trace.steps.len(), s.steps());
        for (rec, dims) in out.trace.steps.iter().zip(s.all_dims()) {
            assert_eq!(rec.dims, dims.as_array());
            assert_eq!(rec.tiles, plan_tiles(*dims, 16, 0.25).unwrap().len());
            assert_eq!(rec.tile_ms.len(), rec.tiles);
        }
        assert_eq!(out.trace.steps[0].tiles, 1);
    }

    #[test]
    fn single_window_volume_runs_one_forward() {
        let r = request(Shape3::cube(8).unwrap(), 0.25);
        let out = infer(&r, &IdentityStub { patch_edge: 8 }).unwrap();
        assert_eq!(out.trace.steps.len(), 1);
        assert_eq!(out.trace.steps[0].tiles, 1);
    }

    #[test]
    fn rejects_mismatched_context() {
        let mut r = request(Shape3::cube(8).unwrap(), 0.0);
        r.context = ctx_for(Shape3::cube(6).unwrap(), 1);
        assert!(matches!(infer(&r, &IdentityStub { patch_edge: 8 }), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn segmentation_adds_binary_mask() {
        let shape = Shape3::new(10, 9, 7).unwrap();
        let mut r = request(shape, 0.25);
        r.task_kind = TaskKind::Segmentation;
        let out = infer(&r, &IdentityStub { patch_edge: 8 }).unwrap();
        let mask = out.mask.unwrap();
        for (m, p) in mask.as_slice().iter().zip(out.prediction.as_slice()) {
            assert_eq!(*m, if *p > 0.5 { 1.0 } else { 0.0 });
        }
    }

    fn unet_model() -> UNet {
        let cfg = UNetConfig::with_fusion_everywhere(2, 2, 8, 2, 6);
        UNet::new(cfg.clone(), Arc::new(seeded_weights(&cfg, 3))).unwrap()
    }

    #[test]
    fn unet_inference_is_deterministic_and_order_independent() {
        let shape = Shape3::new(13, 9, 6).unwrap();
        let m = unet_model();
        let r = request(shape, 0.25);
        let a = infer(&r, &m).unwrap();
        assert_eq!(infer(&r, &m).unwrap().prediction, a.prediction);
        let mut shuffled = r.clone();
        shuffled.tile_order_seed = Some(99);
        let b = infer(&shuffled, &m).unwrap();
        assert!(a.prediction.max_abs_diff(&b.prediction) <= 1e-6);
        assert!(a.prediction.is_finite());
    }

    #[test]
    fn ablation_differs_on_multi_step_shapes_only() {
        let m = unet_model();
        let r = request(Shape3::new(14, 10, 6).unwrap(), 0.25);
        let full = infer(&r, &m).unwrap();
        assert!(full.trace.steps.len() > 1);
        let abl = infer_ablation_no_naicl(&r, &m).unwrap();
        assert_ne!(full.prediction, abl.prediction);

        let small = request(Shape3::new(8, 5, 7).unwrap(), 0.25);
        assert_eq!(infer(&small, &m).unwrap().prediction, infer_ablation_no_naicl(&small, &m).unwrap().prediction);
    }

    #[test]
    fn registries_resolve_by_name() {
        let cfg = UNetConfig::with_fusion_everywhere(2, 2, 8, 2, 6);
        let models = builtin_models();
        assert_eq!(models.names(), vec!["identity", "unet"]);
        let stub = models.get("identity").unwrap().build(&cfg, None).unwrap();
        assert_eq!(stub.name(), "identity");
        assert!(matches!(models.get("unet").unwrap().build(&cfg, None), Err(Error::Config(_))));

        let modes = builtin_modes();
        let r = request(Shape3::new(12, 5, 5).unwrap(), 0.0);
        for name in modes.names() {
            let out = modes.get(name).unwrap().run(&r, stub.as_ref()).unwrap();
            assert_eq!(out.trace.mode, name);
            assert_eq!(out.prediction, r.target);
        }
    }
}
