//! Three-branch 3D U-Net with context fusion.
//!
//! The target branch is a full encoder/decoder. The semantic-context branch
//! and the autoregressive-context branch are encoders that share one set of
//! weights; the autoregressive branch adds a learned per-channel offset to
//! its first-stage features. Encoder stages pass target features into the
//! context branches (target-to-context fusion); decoder stages pull the
//! averaged context features back into the target (context-to-target fusion).

mod layers;
mod weights;

use std::collections::BTreeSet;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{BamConfig, BamWeights, Blockwise, CrossAttention, KvSource};
use crate::context::{ArContext, ContextSet, FeatureAggregator, MemoryProbe};
use crate::error::{invalid, Error, Result};
use crate::volume::{resample, Interpolation, Shape3, Volume};

pub use layers::{conv3d, instance_norm, leaky_relu, LEAKY_SLOPE, NORM_EPS};
pub use weights::{Tensor, WeightStore};

#[cfg(test)]
pub(crate) use layers::oracle as layer_oracle;

/// Scale of the seeded uniform initialization used for tests and `gen`.
pub const INIT_SCALE: f32 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub stages: usize,
    pub base_channels: usize,
    pub patch_edge: usize,
    pub blocks_per_axis: usize,
    pub proj_width: usize,
    /// 1-based encoder stages with target-to-context fusion.
    pub encoder_fusion: Vec<usize>,
    /// 1-based decoder stages with context-to-target fusion. Stage
    /// `stages` is the bottleneck.
    pub decoder_fusion: Vec<usize>,
}

impl Default for UNetConfig {
    /// Five stages, 32 base channels, 128^3 patches, p = 4, m = 66.
    fn default() -> Self {
        Self::with_fusion_everywhere(5, 32, 128, 4, 66)
    }
}

impl UNetConfig {
    pub fn with_fusion_everywhere(
        stages: usize,
        base_channels: usize,
        patch_edge: usize,
        blocks_per_axis: usize,
        proj_width: usize,
    ) -> Self {
        Self {
            stages,
            base_channels,
            patch_edge,
            blocks_per_axis,
            proj_width,
            encoder_fusion: (1..=stages).collect(),
            decoder_fusion: (1..=stages).collect(),
        }
    }

    /// Channel width at 1-based stage `s`.
    pub fn channels(&self, s: usize) -> usize {
        self.base_channels << (s - 1)
    }

    /// Spatial edge at 1-based stage `s`.
    pub fn edge(&self, s: usize) -> usize {
        self.patch_edge >> (s - 1)
    }

    pub fn stage_shape(&self, s: usize) -> Shape3 {
        Shape3::cube(self.edge(s)).expect("validated edge")
    }

    pub fn patch_shape(&self) -> Shape3 {
        self.stage_shape(1)
    }

    pub fn bam(&self, s: usize) -> BamConfig {
        BamConfig { blocks_per_axis: self.blocks_per_axis, proj_width: self.proj_width, channels: self.channels(s) }
    }

    /// Checks every cross-field constraint; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.stages == 0 || self.stages > 16 {
            return cfg_err(format!("stages: must be in 1..=16, got {}", self.stages));
        }
        if self.base_channels == 0 {
            return cfg_err("base_channels: must be >= 1".into());
        }
        let div = 1usize << (self.stages - 1);
        if self.patch_edge < 2 || self.patch_edge % 2 != 0 || self.patch_edge % div != 0 {
            return cfg_err(format!(
                "patch_edge: {} must be even and divisible by 2^(stages-1) = {div}",
                self.patch_edge
            ));
        }
        if self.blocks_per_axis == 0 {
            return cfg_err("blocks_per_axis: must be >= 1".into());
        }
        if self.proj_width < 6 || self.proj_width % 6 != 0 {
            return cfg_err(format!("proj_width: {} is not a positive multiple of 6", self.proj_width));
        }
        for (field, sites) in [("encoder_fusion", &self.encoder_fusion), ("decoder_fusion", &self.decoder_fusion)] {
            let unique: BTreeSet<_> = sites.iter().collect();
            if unique.len() != sites.len() {
                return cfg_err(format!("{field}: duplicate stage index"));
            }
            for &s in sites {
                if s == 0 || s > self.stages {
                    return cfg_err(format!("{field}: stage {s} outside 1..={}", self.stages));
                }
                if self.edge(s) % self.blocks_per_axis != 0 {
                    return cfg_err(format!(
                        "{field}: stage {s} edge {} is not divisible by blocks_per_axis = {}",
                        self.edge(s),
                        self.blocks_per_axis
                    ));
                }
            }
        }
        Ok(())
    }

    fn decoder_sites(&self) -> Vec<usize> {
        let mut s = self.decoder_fusion.clone();
        s.sort_unstable();
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Target,
    Context,
    Autoregressive,
}

impl Branch {
    /// Weight-name prefix. The autoregressive branch resolves to the
    /// context branch's parameters.
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Target => "tgt",
            Branch::Context | Branch::Autoregressive => "ctx",
        }
    }

    pub fn input_channels(self) -> usize {
        match self {
            Branch::Target => 1,
            Branch::Context | Branch::Autoregressive => 2,
        }
    }
}

pub const AR_EMBED: &str = "ar.embed";

fn conv_names(prefix: &str, part: &str, s: usize, n: usize) -> (String, String) {
    (format!("{prefix}.{part}.s{s}.conv{n}.weight"), format!("{prefix}.{part}.s{s}.conv{n}.bias"))
}

pub fn fusion_names(site: &str, s: usize) -> [String; 5] {
    [
        format!("fuse.{site}.s{s}.attn.w_q"),
        format!("fuse.{site}.s{s}.attn.w_k"),
        format!("fuse.{site}.s{s}.attn.r_ar"),
        format!("fuse.{site}.s{s}.proj.weight"),
        format!("fuse.{site}.s{s}.proj.bias"),
    ]
}

/// Every parameter the configuration needs, with its shape.
pub fn parameter_specs(cfg: &UNetConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let conv = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, part: &str, s: usize, n: usize, cout: usize, cin: usize, k: usize| {
        let (w, b) = conv_names(prefix, part, s, n);
        out.push((w, vec![cout, cin, k, k, k]));
        out.push((b, vec![cout]));
    };
    for branch in [Branch::Target, Branch::Context] {
        for s in 1..=cfg.stages {
            let cin = if s == 1 { branch.input_channels() } else { cfg.channels(s - 1) };
            conv(&mut out, branch.prefix(), "enc", s, 1, cfg.channels(s), cin, 3);
            conv(&mut out, branch.prefix(), "enc", s, 2, cfg.channels(s), cfg.channels(s), 3);
        }
    }
    for s in 1..cfg.stages {
        conv(&mut out, "tgt", "dec", s, 1, cfg.channels(s), cfg.channels(s + 1) + cfg.channels(s), 3);
        conv(&mut out, "tgt", "dec", s, 2, cfg.channels(s), cfg.channels(s), 3);
    }
    out.push(("tgt.head.weight".into(), vec![1, cfg.channels(1), 1, 1, 1]));
    out.push(("tgt.head.bias".into(), vec![1]));
    out.push((AR_EMBED.into(), vec![cfg.channels(1)]));
    for (site, stages) in [("enc", &cfg.encoder_fusion), ("dec", &cfg.decoder_fusion)] {
        for &s in stages {
            let c = cfg.channels(s);
            let [wq, wk, r, pw, pb] = fusion_names(site, s);
            out.push((wq, vec![c, cfg.proj_width]));
            out.push((wk, vec![c, cfg.proj_width]));
            out.push((r, vec![cfg.proj_width]));
            out.push((pw, vec![c, 2 * c, 1, 1, 1]));
            out.push((pb, vec![c]));
        }
    }
    out
}

/// Seeded uniform(-0.05, 0.05) weights for `cfg`.
pub fn seeded_weights(cfg: &UNetConfig, seed: u64) -> WeightStore {
    WeightStore::seeded(parameter_specs(cfg), seed, INIT_SCALE)
}

/// Knobs for [`UNet::forward_with`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'p> {
    /// Context pairs encoded together before being folded into the running
    /// mean. Peak residency grows with this, never with the number of pairs.
    pub mini_batch: usize,
    pub probe: Option<&'p MemoryProbe>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self { mini_batch: 1, probe: None }
    }
}

struct Fusion<'a> {
    bam: BamConfig,
    attn: BamWeights,
    proj_w: &'a [f32],
    proj_b: &'a [f32],
}

/// A validated model: configuration, weights and attention kernel.
#[derive(Clone)]
pub struct UNet {
    cfg: UNetConfig,
    weights: Arc<WeightStore>,
    kernel: Arc<dyn CrossAttention>,
}

impl std::fmt::Debug for UNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UNet").field("cfg", &self.cfg).field("kernel", &self.kernel.name()).finish()
    }
}

impl UNet {
    /// Fails with a configuration error if any parameter is missing or misshapen.
    pub fn new(cfg: UNetConfig, weights: Arc<WeightStore>) -> Result<Self> {
        cfg.validate()?;
        for (name, shape) in parameter_specs(&cfg) {
            weights.expect(&name, &shape)?;
        }
        Ok(Self { cfg, weights, kernel: Arc::new(Blockwise) })
    }

    /// Swaps the cross-attention kernel used by every fusion site.
    pub fn with_kernel(mut self, kernel: Arc<dyn CrossAttention>) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    fn param(&self, name: &str) -> &[f32] {
        self.weights.get(name).expect("validated at construction").data()
    }

    fn conv_block(&self, prefix: &str, part: &str, s: usize, input: &Volume, first_stride: usize) -> Result<Volume> {
        let c = self.cfg.channels(s);
        let (w1, b1) = conv_names(prefix, part, s, 1);
        let mut x = conv3d(input, self.param(&w1), self.param(&b1), c, 3, first_stride, 1)?;
        instance_norm(&mut x);
        leaky_relu(&mut x);
        let (w2, b2) = conv_names(prefix, part, s, 2);
        let mut x = conv3d(&x, self.param(&w2), self.param(&b2), c, 3, 1, 1)?;
        instance_norm(&mut x);
        leaky_relu(&mut x);
        Ok(x)
    }

    fn encode_stage(&self, branch: Branch, s: usize, input: &Volume) -> Result<Volume> {
        let mut f = self.conv_block(branch.prefix(), "enc", s, input, if s == 1 { 1 } else { 2 })?;
        if s == 1 && branch == Branch::Autoregressive {
            add_channel_offsets(&mut f, self.param(AR_EMBED));
        }
        Ok(f)
    }

    fn check_input(&self, x: &Volume, channels: usize, what: &str) -> Result<()> {
        let want = self.cfg.patch_shape();
        if x.channels() != channels || x.shape() != want {
            return Err(invalid(format!(
                "{what} must be {channels}x{want}, got {}x{}",
                x.channels(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Per-stage encoder features of one branch, without any fusion.
    pub fn branch_encode(&self, x: &Volume, branch: Branch) -> Result<Vec<Volume>> {
        self.check_input(x, branch.input_channels(), "branch input")?;
        let mut feats: Vec<Volume> = Vec::with_capacity(self.cfg.stages);
        for s in 1..=self.cfg.stages {
            let f = self.encode_stage(branch, s, feats.last().unwrap_or(x))?;
            feats.push(f);
        }
        Ok(feats)
    }

    fn fusion(&self, site: &str, s: usize) -> Fusion<'_> {
        let [wq, wk, r, pw, pb] = fusion_names(site, s);
        Fusion {
            bam: self.cfg.bam(s),
            attn: BamWeights { w_q: self.param(&wq).to_vec(), w_k: self.param(&wk).to_vec(), r_ar: self.param(&r).to_vec() },
            proj_w: self.param(&pw),
            proj_b: self.param(&pb),
        }
    }

    fn fuse(&self, f: &Fusion<'_>, query: &Volume, query_is_ar: bool, sources: &[KvSource<'_>]) -> Result<Volume> {
        let attended = self.kernel.forward(query, query_is_ar, sources, &f.bam, &f.attn)?;
        let joined = Volume::concat_channels(&[query, &attended])?;
        let delta = conv3d(&joined, f.proj_w, f.proj_b, query.channels(), 1, 1, 0)?;
        let mut out = query.clone();
        for (o, d) in out.as_mut_slice().iter_mut().zip(delta.as_slice()) {
            *o += d;
        }
        Ok(out)
    }

    /// `ctx + conv1(concat(ctx, attn(q = ctx, kv = [tgt])))` at encoder stage `s`.
    pub fn fuse_target_to_context(&self, s: usize, ctx: &Volume, tgt: &Volume, ctx_is_ar: bool) -> Result<Volume> {
        if !self.cfg.encoder_fusion.contains(&s) {
            return Err(invalid(format!("encoder stage {s} has no fusion site")));
        }
        if ctx.shape() != tgt.shape() || ctx.channels() != tgt.channels() {
            return Err(invalid("target and context features are not congruent"));
        }
        self.fuse(&self.fusion("enc", s), ctx, ctx_is_ar, &[KvSource::semantic(tgt)])
    }

    /// `tgt + conv1(concat(tgt, attn(q = tgt, kv = [sem] + [ar])))` at decoder stage `s`.
    pub fn fuse_context_to_target(&self, s: usize, tgt: &Volume, sem: &Volume, ar: Option<&Volume>) -> Result<Volume> {
        if !self.cfg.decoder_fusion.contains(&s) {
            return Err(invalid(format!("decoder stage {s} has no fusion site")));
        }
        let congruent = |v: &Volume| v.shape() == tgt.shape() && v.channels() == tgt.channels();
        if !congruent(sem) || !ar.map_or(true, congruent) {
            return Err(invalid("target and context features are not congruent"));
        }
        let mut sources = vec![KvSource::semantic(sem)];
        if let Some(a) = ar {
            sources.push(KvSource::autoregressive(a));
        }
        self.fuse(&self.fusion("dec", s), tgt, false, &sources)
    }

    /// Encodes one context input with target-to-context fusion and returns
    /// its features at the decoder fusion stages.
    fn context_features(&self, input: &Volume, tgt: &[Volume], branch: Branch) -> Result<Vec<Volume>> {
        let sites = self.cfg.decoder_sites();
        let last = sites.last().copied().unwrap_or(0);
        let mut out = Vec::with_capacity(sites.len());
        let mut prev: Option<Volume> = None;
        for s in 1..=last {
            let mut f = self.encode_stage(branch, s, prev.as_ref().unwrap_or(input))?;
            if self.cfg.encoder_fusion.contains(&s) {
                f = self.fuse_target_to_context(s, &f, &tgt[s - 1], branch == Branch::Autoregressive)?;
            }
            if sites.contains(&s) {
                out.push(f.clone());
            }
            prev = Some(f);
        }
        Ok(out)
    }

    fn decode(&self, tgt: &[Volume], mut fuse_at: impl FnMut(usize, Volume) -> Result<Volume>) -> Result<Volume> {
        let stages = self.cfg.stages;
        let mut d = fuse_at(stages, tgt[stages - 1].clone())?;
        for s in (1..stages).rev() {
            let up = resample(&d, self.cfg.stage_shape(s), Interpolation::Trilinear);
            let joined = Volume::concat_channels(&[&up, &tgt[s - 1]])?;
            d = self.conv_block("tgt", "dec", s, &joined, 1)?;
            d = fuse_at(s, d)?;
        }
        conv3d(&d, self.param("tgt.head.weight"), self.param("tgt.head.bias"), 1, 1, 1, 0)
    }

    /// One patch prediction from the target, its semantic context and the
    /// (possibly empty) autoregressive context.
    pub fn forward(&self, x: &Volume, ctx: &ContextSet, ar: &ArContext) -> Result<Volume> {
        self.forward_with(x, ctx, ar, &ForwardOptions::default())
    }

    pub fn forward_with(&self, x: &Volume, ctx: &ContextSet, ar: &ArContext, opts: &ForwardOptions<'_>) -> Result<Volume> {
        self.check_input(x, 1, "target")?;
        if ctx.is_empty() {
            return Err(invalid("semantic context set is empty"));
        }
        if ctx.shape() != self.cfg.patch_shape() {
            return Err(invalid(format!("context shape {} differs from patch {}", ctx.shape(), self.cfg.patch_shape())));
        }
        let ar_input = ar.stacked();
        if let Some(a) = &ar_input {
            self.check_input(a, 2, "autoregressive context")?;
        }
        let tgt = self.branch_encode(x, Branch::Target)?;

        let mut agg = FeatureAggregator::new(opts.probe);
        for chunk in ctx.pairs().chunks(opts.mini_batch.max(1)) {
            let sets: Vec<Vec<Volume>> = if chunk.len() == 1 {
                vec![self.context_features(&chunk[0].stacked(), &tgt, Branch::Context)?]
            } else {
                chunk
                    .par_iter()
                    .map(|p| self.context_features(&p.stacked(), &tgt, Branch::Context))
                    .collect::<Result<_>>()?
            };
            for set in &sets {
                agg.note_in_flight(set);
            }
            for set in sets {
                agg.push(set)?;
            }
        }
        let semantic = if self.cfg.decoder_fusion.is_empty() { Vec::new() } else { agg.finish()? };
        let autoregressive = match &ar_input {
            Some(a) => Some(self.context_features(a, &tgt, Branch::Autoregressive)?),
            None => None,
        };

        let sites = self.cfg.decoder_sites();
        self.decode(&tgt, |s, d| match sites.iter().position(|&x| x == s) {
            Some(i) => self.fuse_context_to_target(s, &d, &semantic[i], autoregressive.as_ref().map(|a| &a[i])),
            None => Ok(d),
        })
    }

    /// Target branch alone: encoder, decoder and head with every fusion site skipped.
    pub fn forward_context_free(&self, x: &Volume) -> Result<Volume> {
        self.check_input(x, 1, "target")?;
        let tgt = self.branch_encode(x, Branch::Target)?;
        self.decode(&tgt, |_, d| Ok(d))
    }
}

/// Adds `offsets[c]` to every voxel of channel `c`.
pub fn add_channel_offsets(x: &mut Volume, offsets: &[f32]) {
    for (c, &e) in offsets.iter().enumerate().take(x.channels()) {
        for v in x.channel_mut(c) {
            *v += e;
        }
    }
}
