//! Wall-clock and analytic cost comparison of blockwise vs voxel-level attention.

use std::time::{Duration, Instant};

use serde::Serialize;

use super::{bam_forward, dense_cross_attention, BamConfig, BamWeights, KvSource};
use crate::error::{invalid, Result};
use crate::volume::{Shape3, Volume};

/// Multiply-add style operation count of one blockwise forward over cubic
/// maps of `edge` voxels per side with `sources` key/value maps.
pub fn bam_flops(cfg: &BamConfig, edge: usize, sources: usize) -> u64 {
    let n = edge.pow(3) as u64;
    let b = cfg.blocks() as u64;
    let c = cfg.channels as u64;
    let m = cfg.proj_width as u64;
    let s = sources as u64;
    let keys = b * s;
    let pooling = c * n * (1 + s);
    let projection = 2 * b * c * m * (1 + s) + b * m * (1 + s);
    let logits = 2 * b * keys * m;
    let softmax = 3 * b * keys;
    let mixing = 2 * b * keys * c * (n / b);
    pooling + projection + logits + softmax + mixing
}

/// Same count for dense attention with one token per voxel.
pub fn dense_flops(cfg: &BamConfig, edge: usize, sources: usize) -> u64 {
    let n = edge.pow(3) as u64;
    let c = cfg.channels as u64;
    let m = cfg.proj_width as u64;
    let keys = n * sources as u64;
    let projection = 2 * n * c * m * (1 + sources as u64);
    let logits = 2 * n * keys * m;
    let softmax = 3 * n * keys;
    let mixing = 2 * n * keys * c;
    projection + logits + softmax + mixing
}

#[derive(Debug, Clone)]
pub struct BenchSettings {
    pub edges: Vec<usize>,
    pub cfg: BamConfig,
    pub sources: usize,
    /// Each kernel is re-run until this much time has accumulated; the
    /// fastest run is reported.
    pub min_time: Duration,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub edge: usize,
    pub voxels: usize,
    pub flops_bam: u64,
    pub flops_dense: u64,
    pub time_bam_ms: f64,
    pub time_dense_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub blocks_per_axis: usize,
    pub channels: usize,
    pub proj_width: usize,
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of log time against log voxel count.
    pub exponent_bam: f64,
    pub exponent_dense: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn growth_exponent(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

fn fastest_run_ms(min_time: Duration, mut f: impl FnMut()) -> f64 {
    let mut best = f64::INFINITY;
    let mut spent = Duration::ZERO;
    let mut runs = 0;
    while spent < min_time && runs < 200 {
        let start = Instant::now();
        f();
        let dt = start.elapsed();
        spent += dt;
        runs += 1;
        best = best.min(dt.as_secs_f64() * 1e3);
    }
    best
}

fn bench_map(channels: usize, edge: usize, seed: u64) -> Volume {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape3::cube(edge).expect("edge > 0");
    Volume::from_fn(channels, shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Times both kernels at every edge and fits their growth exponents.
pub fn bam_bench(settings: &BenchSettings) -> Result<BenchReport> {
    let cfg = settings.cfg;
    cfg.validate()?;
    if settings.edges.len() < 2 {
        return Err(invalid("benchmark needs at least two edges to fit an exponent"));
    }
    if settings.sources == 0 {
        return Err(invalid("benchmark needs at least one source"));
    }
    if let Some(e) = settings.edges.iter().find(|&&e| e == 0 || e % cfg.blocks_per_axis != 0) {
        return Err(invalid(format!("edge {e} is not divisible by p = {}", cfg.blocks_per_axis)));
    }
    let w = BamWeights::seeded(&cfg, settings.seed, 0.1);
    let mut rows = Vec::with_capacity(settings.edges.len());
    for &edge in &settings.edges {
        let q = bench_map(cfg.channels, edge, settings.seed);
        let maps: Vec<Volume> = (0..settings.sources)
            .map(|s| bench_map(cfg.channels, edge, settings.seed + 1 + s as u64))
            .collect();
        let srcs: Vec<KvSource> = maps.iter().map(KvSource::semantic).collect();
        let time_bam_ms = fastest_run_ms(settings.min_time, || {
            std::hint::black_box(bam_forward(&q, false, &srcs, &cfg, &w).expect("validated"));
        });
        let time_dense_ms = fastest_run_ms(settings.min_time, || {
            std::hint::black_box(dense_cross_attention(&q, false, &srcs, &cfg, &w).expect("validated"));
        });
        rows.push(BenchRow {
            edge,
            voxels: edge.pow(3),
            flops_bam: bam_flops(&cfg, edge, settings.sources),
            flops_dense: dense_flops(&cfg, edge, settings.sources),
            time_bam_ms,
            time_dense_ms,
        });
    }
    let voxels: Vec<f64> = rows.iter().map(|r| r.voxels as f64).collect();
    let tb: Vec<f64> = rows.iter().map(|r| r.time_bam_ms).collect();
    let td: Vec<f64> = rows.iter().map(|r| r.time_dense_ms).collect();
    Ok(BenchReport {
        blocks_per_axis: cfg.blocks_per_axis,
        channels: cfg.channels,
        proj_width: cfg.proj_width,
        exponent_bam: growth_exponent(&voxels, &tb),
        exponent_dense: growth_exponent(&voxels, &td),
        rows,
    })
}
