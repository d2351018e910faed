//! Release-gate invariant suite behind `naicl selftest`.

use std::sync::Arc;

use naicl_core::attention::{bam_dense_oracle, bam_forward, bam_logits, BamConfig, BamWeights, KvSource};
use naicl_core::context::{feature_set_bytes, ArContext, ContextPair, ContextSet, MemoryProbe};
use naicl_core::pipeline::{infer, IdentityStub, InferenceRequest, TaskKind};
use naicl_core::schedule::{num_steps, plan_tiles, step_dims};
use naicl_core::unet::{seeded_weights, Branch, ForwardOptions, UNet, UNetConfig};
use naicl_core::volume::{Shape3, Volume};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Shift the kernel's AR embedding away from the reference weights.
    RAr,
}

#[derive(Debug, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Serialize)]
pub struct SelftestReport {
    pub pass: bool,
    pub suites: Vec<SuiteResult>,
}

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_map(channels: usize, shape: Shape3, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume::from_fn(channels, shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn rel_err(got: &Volume, want: &Volume) -> f32 {
    let scale = want.as_slice().iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-12);
    got.max_abs_diff(want) / scale
}

fn schedule_fuzz(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = [8usize, 16, 32, 64, 128];
    let mut violations = 0;
    for _ in 0..1000 {
        let e = [0; 3].map(|_| rng.gen_range(1..=512usize));
        let patch = *edges.choose(&mut rng).unwrap();
        let shape = Shape3::new(e[0], e[1], e[2]).unwrap();
        let t_total = num_steps(shape, patch);
        let reach = |t: usize| patch << (t - 1);
        if reach(t_total) < shape.max_extent() || (t_total > 1 && reach(t_total - 1) >= shape.max_extent()) {
            violations += 1;
            continue;
        }
        for t in 1..=t_total {
            let dims = step_dims(shape, t_total, t).map_err(|e| e.to_string())?;
            let div = 1usize << (t_total - t);
            if dims.as_array() != e.map(|a| a.div_ceil(div)) {
                violations += 1;
            }
            let plan = plan_tiles(dims, patch, 0.25).map_err(|e| e.to_string())?;
            for axis in 0..3 {
                let n = dims.as_array()[axis];
                let mut hit = vec![false; n];
                for o in &plan.origins {
                    for v in hit.iter_mut().skip(o[axis]).take(patch) {
                        *v = true;
                    }
                }
                if hit.contains(&false) {
                    violations += 1;
                }
            }
        }
    }
    ensure(violations == 0, || format!("{violations} violations"))?;
    Ok("1000 shapes, 0 violations".into())
}

fn bam_oracle(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f32;
    for inst in 0..20u64 {
        let p = [1usize, 2, 4][inst as usize % 3];
        let shape = Shape3::new(p * rng.gen_range(1..=8 / p), p * rng.gen_range(1..=8 / p), p * rng.gen_range(1..=8 / p))
            .unwrap();
        let c = rng.gen_range(1..=4);
        let cfg = BamConfig::new(p, 12, c).unwrap();
        let w = BamWeights::seeded(&cfg, seed + inst, 0.5);
        let q = random_map(c, shape, seed + 100 + inst);
        let maps: Vec<Volume> = (0..rng.gen_range(1..=3u64)).map(|s| random_map(c, shape, seed + 200 + 4 * inst + s)).collect();
        let sources: Vec<KvSource> =
            maps.iter().map(|v| if rng.gen_bool(0.5) { KvSource::autoregressive(v) } else { KvSource::semantic(v) }).collect();
        let got = bam_forward(&q, false, &sources, &cfg, &w).map_err(|e| e.to_string())?;
        let want = bam_dense_oracle(&q, false, &sources, &cfg, &w).map_err(|e| e.to_string())?;
        worst = worst.max(rel_err(&got, &want));
    }
    ensure(worst <= 1e-5, || format!("max relative error {worst:.2e}"))?;
    Ok(format!("20 instances, max relative error {worst:.2e}"))
}

/// The kernel runs with possibly faulted weights, the oracle with the reference.
fn ar_effect(seed: u64, fault: Option<Fault>) -> Check {
    let cfg = BamConfig::new(2, 12, 3).unwrap();
    let reference = BamWeights::seeded(&cfg, seed, 0.5);
    let mut kernel = reference.clone();
    if fault == Some(Fault::RAr) {
        for (i, r) in kernel.r_ar.iter_mut().enumerate() {
            *r += 0.5 * (i % 3) as f32 - 0.25;
        }
    }
    let shape = Shape3::cube(4).unwrap();
    let q = random_map(3, shape, seed + 1);
    let kv = random_map(3, shape, seed + 2);
    let sem = bam_logits(&q, false, &[KvSource::semantic(&kv)], &cfg, &kernel).map_err(|e| e.to_string())?;
    let ar = bam_logits(&q, false, &[KvSource::autoregressive(&kv)], &cfg, &kernel).map_err(|e| e.to_string())?;
    ensure(sem != ar, || "toggling the AR flag left the logits unchanged".into())?;
    let kv_ar = random_map(3, shape, seed + 3);
    let sources = [KvSource::semantic(&kv), KvSource::autoregressive(&kv_ar)];
    let got = bam_forward(&q, false, &sources, &cfg, &kernel).map_err(|e| e.to_string())?;
    let want = bam_dense_oracle(&q, false, &sources, &cfg, &reference).map_err(|e| e.to_string())?;
    let err = rel_err(&got, &want);
    ensure(err <= 1e-5, || format!("AR path deviates from reference by {err:.2e}"))?;
    Ok(format!("AR toggle live, relative error {err:.2e}"))
}

fn identity_stub() -> Check {
    let mut worst = 0.0f32;
    for (h, w, d) in [(20, 13, 9), (40, 24, 17), (16, 16, 16)] {
        let shape = Shape3::new(h, w, d).unwrap();
        let target = random_map(1, shape, (h * w * d) as u64);
        let ctx = ContextSet::new(vec![ContextPair::new(target.clone(), target.clone()).unwrap()]).unwrap();
        for patch in [8, 16] {
            for overlap in [0.0, 0.25] {
                let mut req = InferenceRequest::new(target.clone(), ctx.clone(), TaskKind::Regression);
                req.overlap_fraction = overlap;
                let out = infer(&req, &IdentityStub { patch_edge: patch }).map_err(|e| e.to_string())?;
                ensure(out.prediction.shape() == shape, || format!("{shape}: output {}", out.prediction.shape()))?;
                let err = out.prediction.max_abs_diff(&target);
                let tol = if overlap == 0.0 { 0.0 } else { 1e-6 };
                ensure(err <= tol, || format!("{shape} I={patch} overlap {overlap}: error {err:e}"))?;
                worst = worst.max(err);
            }
        }
    }
    Ok(format!("12 runs, max error {worst:.1e}"))
}

fn tiny_unet(seed: u64) -> UNet {
    let cfg = UNetConfig::with_fusion_everywhere(3, 8, 16, 4, 12);
    UNet::new(cfg.clone(), Arc::new(seeded_weights(&cfg, seed))).expect("complete weights")
}

fn context_of(k: usize, shape: Shape3, seed: u64) -> ContextSet {
    let pairs = (0..k as u64)
        .map(|i| ContextPair::new(random_map(1, shape, seed + 2 * i), random_map(1, shape, seed + 2 * i + 1)).unwrap())
        .collect();
    ContextSet::new(pairs).unwrap()
}

fn context_permutation(seed: u64) -> Check {
    let model = tiny_unet(seed);
    let shape = model.config().patch_shape();
    let x = random_map(1, shape, seed + 1);
    let set = context_of(4, shape, seed + 10);
    let mut pairs = set.pairs().to_vec();
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    pairs.reverse();
    let a = model.forward(&x, &set, &ArContext::Empty).map_err(|e| e.to_string())?;
    let b = model.forward(&x, &ContextSet::new(pairs).unwrap(), &ArContext::Empty).map_err(|e| e.to_string())?;
    let err = a.max_abs_diff(&b);
    ensure(err <= 1e-6, || format!("permutation changed output by {err:e}"))?;
    Ok(format!("k=4, max difference {err:.1e}"))
}

fn memory_probe(seed: u64) -> Check {
    let model = tiny_unet(seed);
    let shape = model.config().patch_shape();
    let x = random_map(1, shape, seed + 1);
    let one_set = feature_set_bytes(&model.branch_encode(&random_map(2, shape, 0), Branch::Context).map_err(|e| e.to_string())?);
    let mut peaks = Vec::new();
    for k in [1usize, 4, 16] {
        let probe = MemoryProbe::new();
        model
            .forward_with(&x, &context_of(k, shape, seed + 20), &ArContext::Empty, &ForwardOptions { mini_batch: 1, probe: Some(&probe) })
            .map_err(|e| e.to_string())?;
        peaks.push(probe.peak());
    }
    let spread = peaks.iter().max().unwrap() - peaks.iter().min().unwrap();
    ensure(spread <= one_set, || format!("peaks {peaks:?} spread beyond one feature set ({one_set} B)"))?;
    Ok(format!("peaks {peaks:?} B for k = 1, 4, 16"))
}

pub fn run(seed: u64, fault: Option<Fault>) -> SelftestReport {
    let checks: [(&'static str, Box<dyn Fn() -> Check>); 6] = [
        ("schedule_exactness", Box::new(move || schedule_fuzz(seed))),
        ("bam_oracle_equivalence", Box::new(move || bam_oracle(seed))),
        ("ar_effect", Box::new(move || ar_effect(seed, fault))),
        ("identity_stub_exactness", Box::new(identity_stub)),
        ("context_permutation_invariance", Box::new(move || context_permutation(seed))),
        ("memory_constancy", Box::new(move || memory_probe(seed))),
    ];
    let suites: Vec<SuiteResult> = checks
        .iter()
        .map(|(name, check)| match check() {
            Ok(detail) => SuiteResult { name, pass: true, detail },
            Err(detail) => SuiteResult { name, pass: false, detail },
        })
        .collect();
    SelftestReport { pass: suites.iter().all(|s| s.pass), suites }
}
