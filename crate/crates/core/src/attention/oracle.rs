//! Scalar reference for the blockwise kernel: explicit loops over blocks,
//! channels and voxels, double-precision throughout, no reshapes.

use super::{validate_inputs, BamConfig, BamWeights, CrossAttention, KvSource};
use crate::error::Result;
use crate::registry::Named;
use crate::volume::Volume;

#[derive(Debug, Default, Clone, Copy)]
pub struct BlockwiseOracle;

impl Named for BlockwiseOracle {
    fn name(&self) -> &'static str {
        "bam-oracle"
    }
}

impl CrossAttention for BlockwiseOracle {
    fn forward(
        &self,
        query: &Volume,
        query_is_ar: bool,
        sources: &[KvSource<'_>],
        cfg: &BamConfig,
        w: &BamWeights,
    ) -> Result<Volume> {
        bam_dense_oracle(query, query_is_ar, sources, cfg, w)
    }
}

/// Positional slot `slot` of block `(bi, bj, bk)`, recomputed from scratch.
fn position(block: [usize; 3], slot: usize, m: usize) -> f64 {
    let per_axis = m / 3;
    let half = m / 6;
    let axis = slot / per_axis;
    let within = slot % per_axis;
    let j = within % half;
    let angle = block[axis] as f64 * (-(2.0 * j as f64 / per_axis as f64) * 10000f64.ln()).exp();
    if within < half {
        angle.sin()
    } else {
        angle.cos()
    }
}

struct Grid {
    p: usize,
    bh: usize,
    bw: usize,
    bd: usize,
}

impl Grid {
    fn block_coords(&self, b: usize) -> [usize; 3] {
        [b / (self.p * self.p), (b / self.p) % self.p, b % self.p]
    }

    fn block_mean(&self, x: &Volume, c: usize, b: usize) -> f64 {
        let [bi, bj, bk] = self.block_coords(b);
        let mut sum = 0.0;
        for i in 0..self.bh {
            for j in 0..self.bw {
                for k in 0..self.bd {
                    sum += x.get(c, bi * self.bh + i, bj * self.bw + j, bk * self.bd + k) as f64;
                }
            }
        }
        sum / (self.bh * self.bw * self.bd) as f64
    }

    /// Projected token of block `b`, with positions taken from block `pos_of`.
    fn token(&self, x: &Volume, proj: &[f32], b: usize, pos_of: usize, marker: Option<&[f32]>, m: usize) -> Vec<f64> {
        let pos_block = self.block_coords(pos_of);
        (0..m)
            .map(|j| {
                let mut acc = 0.0;
                for c in 0..x.channels() {
                    acc += self.block_mean(x, c, b) * proj[c * m + j] as f64;
                }
                acc += position(pos_block, j, m);
                if let Some(r) = marker {
                    acc += r[j] as f64;
                }
                acc
            })
            .collect()
    }
}

fn run(
    query: &Volume,
    query_is_ar: bool,
    sources: &[KvSource<'_>],
    cfg: &BamConfig,
    w: &BamWeights,
    key_positions: Option<&[usize]>,
) -> Volume {
    let p = cfg.blocks_per_axis;
    let m = cfg.proj_width;
    let shape = query.shape();
    let g = Grid { p, bh: shape.h / p, bw: shape.w / p, bd: shape.d / p };
    let b_count = p * p * p;

    let queries: Vec<Vec<f64>> = (0..b_count)
        .map(|b| g.token(query, &w.w_q, b, b, query_is_ar.then_some(&w.r_ar[..]), m))
        .collect();
    let mut keys: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for (s, src) in sources.iter().enumerate() {
        for b in 0..b_count {
            let pos_of = key_positions.map_or(b, |kp| kp[b]);
            let marker = src.is_autoregressive.then_some(&w.r_ar[..]);
            keys.push((s, b, g.token(src.features, &w.w_k, b, pos_of, marker, m)));
        }
    }

    let mut out = Volume::zeros(query.channels(), shape);
    for (qb, q) in queries.iter().enumerate() {
        let logits: Vec<f64> = keys
            .iter()
            .map(|(_, _, k)| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (m as f64).sqrt())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();

        let [qi, qj, qk] = g.block_coords(qb);
        for c in 0..query.channels() {
            for i in 0..g.bh {
                for j in 0..g.bw {
                    for k in 0..g.bd {
                        let mut acc = 0.0f64;
                        for ((s, kb, _), e) in keys.iter().zip(&exps) {
                            let [ki, kj, kk] = g.block_coords(*kb);
                            let v = sources[*s].features.get(c, ki * g.bh + i, kj * g.bw + j, kk * g.bd + k);
                            acc += e / total * v as f64;
                        }
                        out.set(c, qi * g.bh + i, qj * g.bw + j, qk * g.bd + k, acc as f32);
                    }
                }
            }
        }
    }
    out
}

/// Same mathematics as [`super::bam_forward`], evaluated one scalar at a time.
/// Meant for tiny maps only.
pub fn bam_dense_oracle(
    query: &Volume,
    query_is_ar: bool,
    sources: &[KvSource<'_>],
    cfg: &BamConfig,
    w: &BamWeights,
) -> Result<Volume> {
    validate_inputs(query, sources, cfg, w)?;
    Ok(run(query, query_is_ar, sources, cfg, w, None))
}

/// Single semantic source whose key block `b` takes the positional row of
/// block `key_positions[b]`.
#[cfg(test)]
pub(crate) fn oracle_forward_with_key_positions(
    query: &Volume,
    kv: &Volume,
    cfg: &BamConfig,
    w: &BamWeights,
    key_positions: &[usize],
) -> Volume {
    run(query, false, &[KvSource::semantic(kv)], cfg, w, Some(key_positions))
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::{bam_forward, bam_logits};
    use super::*;
    use crate::volume::Shape3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn agrees_with_fast_kernel_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..24u64 {
            let p = [1usize, 2, 4][trial as usize % 3];
            let per = rng.gen_range(1..=8 / p);
            let shape = Shape3::new(p * per, p * rng.gen_range(1..=8 / p), p * rng.gen_range(1..=8 / p)).unwrap();
            let c = rng.gen_range(1..4);
            let cfg = BamConfig::new(p, 6 * rng.gen_range(1..4), c).unwrap();
            let w = BamWeights::seeded(&cfg, trial, 1.0);
            let q = random_map(c, shape, trial * 31);
            let maps: Vec<Volume> = (0..rng.gen_range(1..=3)).map(|s| random_map(c, shape, trial * 31 + 1 + s)).collect();
            let srcs: Vec<KvSource> = maps.iter().map(|m| KvSource { features: m, is_autoregressive: rng.gen() }).collect();
            let q_ar = rng.gen();
            let fast = bam_forward(&q, q_ar, &srcs, &cfg, &w).unwrap();
            let slow = bam_dense_oracle(&q, q_ar, &srcs, &cfg, &w).unwrap();
            assert!(rel_err(&fast, &slow) <= 1e-5, "trial {trial}: {}", rel_err(&fast, &slow));
        }
    }

    #[test]
    fn single_block_identity() {
        let cfg = BamConfig::new(1, 6, 2).unwrap();
        let w = BamWeights::seeded(&cfg, 3, 1.0);
        let q = random_map(2, Shape3::cube(4).unwrap(), 1);
        let kv = random_map(2, Shape3::cube(4).unwrap(), 2);
        let out = bam_dense_oracle(&q, false, &[KvSource::semantic(&kv)], &cfg, &w).unwrap();
        assert!(rel_err(&out, &kv) < 1e-6);
    }

    #[test]
    fn ar_toggle_moves_both_implementations_together() {
        let cfg = BamConfig::new(2, 6, 2).unwrap();
        let mut w = BamWeights::seeded(&cfg, 5, 1.0);
        w.r_ar.iter_mut().for_each(|r| *r *= 4.0);
        let shape = Shape3::cube(4).unwrap();
        let q = random_map(2, shape, 1);
        let a = random_map(2, shape, 2);
        let b = random_map(2, shape, 3);
        let run_both = |ar: bool| {
            let srcs = [KvSource::semantic(&a), KvSource { features: &b, is_autoregressive: ar }];
            (bam_forward(&q, false, &srcs, &cfg, &w).unwrap(), bam_dense_oracle(&q, false, &srcs, &cfg, &w).unwrap())
        };
        let (f0, o0) = run_both(false);
        let (f1, o1) = run_both(true);
        assert!(f0.max_abs_diff(&f1) > 1e-4);
        assert!(rel_err(&f0, &o0) < 1e-5 && rel_err(&f1, &o1) < 1e-5);
        let fast_shift = f1.max_abs_diff(&f0);
        let slow_shift = o1.max_abs_diff(&o0);
        assert!((fast_shift - slow_shift).abs() < 1e-5);
        let l0 = bam_logits(&q, false, &[KvSource::semantic(&b)], &cfg, &w).unwrap();
        let l1 = bam_logits(&q, false, &[KvSource::autoregressive(&b)], &cfg, &w).unwrap();
        assert_ne!(l0, l1);
    }
}
