//! Token-per-voxel cross-attention: the quadratic baseline BAM replaces.

use rayon::prelude::*;

use super::{validate_inputs, BamConfig, BamWeights, CrossAttention, KvSource};
use crate::error::Result;
use crate::registry::Named;
use crate::volume::Volume;

#[derive(Debug, Default, Clone, Copy)]
pub struct VoxelDense;

impl Named for VoxelDense {
    fn name(&self) -> &'static str {
        "dense-voxel"
    }
}

impl CrossAttention for VoxelDense {
    fn forward(
        &self,
        query: &Volume,
        query_is_ar: bool,
        sources: &[KvSource<'_>],
        cfg: &BamConfig,
        w: &BamWeights,
    ) -> Result<Volume> {
        dense_cross_attention(query, query_is_ar, sources, cfg, w)
    }
}

/// Per-voxel sine-cosine row, same frequency layout as the block table.
fn voxel_positions(x: &Volume, m: usize) -> Vec<f32> {
    let s = x.shape();
    let third = m / 3;
    let half = m / 6;
    let freqs: Vec<f64> = (0..half)
        .map(|j| 1.0 / 10000f64.powf(2.0 * j as f64 / third as f64))
        .collect();
    let mut out = Vec::with_capacity(s.voxels() * m);
    for i in 0..s.h {
        for j in 0..s.w {
            for k in 0..s.d {
                for pos in [i, j, k] {
                    out.extend(freqs.iter().map(|f| (pos as f64 * f).sin() as f32));
                    out.extend(freqs.iter().map(|f| (pos as f64 * f).cos() as f32));
                }
            }
        }
    }
    out
}

/// Projects every voxel to width `m`; returned transposed (`m x n`) so the
/// logit loop runs contiguously over tokens.
fn project_transposed(x: &Volume, proj: &[f32], pos: &[f32], marker: Option<&[f32]>, m: usize) -> Vec<f32> {
    let n = x.shape().voxels();
    let mut out = vec![0.0f32; m * n];
    for j in 0..m {
        let row = &mut out[j * n..(j + 1) * n];
        for (t, o) in row.iter_mut().enumerate() {
            *o = pos[t * m + j] + marker.map_or(0.0, |r| r[j]);
        }
        for c in 0..x.channels() {
            let wv = proj[c * m + j];
            for (o, &v) in row.iter_mut().zip(x.channel(c)) {
                *o += v * wv;
            }
        }
    }
    out
}

/// Dense cross-attention with one token per voxel. Costs `O(n^2)` in the
/// voxel count `n`; the `n x n` matrix is never materialized.
pub fn dense_cross_attention(
    query: &Volume,
    query_is_ar: bool,
    sources: &[KvSource<'_>],
    cfg: &BamConfig,
    w: &BamWeights,
) -> Result<Volume> {
    validate_inputs(query, sources, cfg, w)?;
    let m = cfg.proj_width;
    let n = query.shape().voxels();
    let channels = query.channels();
    let pos = voxel_positions(query, m);
    let q_t = project_transposed(query, &w.w_q, &pos, query_is_ar.then_some(&w.r_ar[..]), m);

    // Keys and values of all sources, concatenated along the token axis.
    let keys = n * sources.len();
    let mut k_t = vec![0.0f32; m * keys];
    let mut v_t = vec![0.0f32; channels * keys];
    for (s, src) in sources.iter().enumerate() {
        let kp = project_transposed(src.features, &w.w_k, &pos, src.is_autoregressive.then_some(&w.r_ar[..]), m);
        for j in 0..m {
            k_t[j * keys + s * n..j * keys + (s + 1) * n].copy_from_slice(&kp[j * n..(j + 1) * n]);
        }
        for c in 0..channels {
            v_t[c * keys + s * n..c * keys + (s + 1) * n].copy_from_slice(src.features.channel(c));
        }
    }

    let scale = 1.0 / (m as f32).sqrt();
    let rows: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map_init(
            || vec![0.0f32; keys],
            |logits, t| {
                logits.fill(0.0);
                for j in 0..m {
                    let qv = q_t[j * n + t] * scale;
                    for (l, &kv) in logits.iter_mut().zip(&k_t[j * keys..(j + 1) * keys]) {
                        *l += qv * kv;
                    }
                }
                let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0f32;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    total += *l;
                }
                (0..channels)
                    .map(|c| {
                        let v = &v_t[c * keys..(c + 1) * keys];
                        logits.iter().zip(v).map(|(a, b)| a * b).sum::<f32>() / total
                    })
                    .collect()
            },
        )
        .collect();

    let mut out = vec![0.0f32; channels * n];
    for (t, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[c * n + t] = v;
        }
    }
    Volume::new(channels, query.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;
    use crate::volume::Shape3;

    /// Direct double-precision evaluation, token by token.
    fn scalar_dense(q: &Volume, kv: &Volume, cfg: &BamConfig, w: &BamWeights) -> Volume {
        let s = q.shape();
        let m = cfg.proj_width;
        let coords: Vec<[usize; 3]> = (0..s.voxels()).map(|t| [t / (s.w * s.d), (t / s.d) % s.w, t % s.d]).collect();
        let pos = |c: [usize; 3], slot: usize| {
            let axis = slot / (m / 3);
            let within = slot % (m / 3);
            let j = within % (m / 6);
            let a = c[axis] as f64 / 10000f64.powf(2.0 * j as f64 / (m / 3) as f64);
            if within < m / 6 { a.sin() } else { a.cos() }
        };
        let token = |x: &Volume, proj: &[f32], t: usize| -> Vec<f64> {
            let [i, j, k] = coords[t];
            (0..m)
                .map(|slot| {
                    (0..x.channels()).map(|c| x.get(c, i, j, k) as f64 * proj[c * m + slot] as f64).sum::<f64>()
                        + pos(coords[t], slot)
                })
                .collect()
        };
        let keys: Vec<Vec<f64>> = (0..s.voxels()).map(|t| token(kv, &w.w_k, t)).collect();
        let mut out = Volume::zeros(q.channels(), s);
        for t in 0..s.voxels() {
            let qt = token(q, &w.w_q, t);
            let logits: Vec<f64> = keys.iter().map(|k| qt.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (m as f64).sqrt()).collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let [i, j, k] = coords[t];
            for c in 0..q.channels() {
                let v: f64 = (0..s.voxels()).map(|u| e[u] / z * kv.get(c, coords[u][0], coords[u][1], coords[u][2]) as f64).sum();
                out.set(c, i, j, k, v as f32);
            }
        }
        out
    }

    #[test]
    fn matches_scalar_evaluation() {
        let shape = Shape3::new(3, 2, 4).unwrap();
        let cfg = BamConfig::new(1, 12, 2).unwrap();
        let w = BamWeights::seeded(&cfg, 2, 1.0);
        let q = random_map(2, shape, 1);
        let kv = random_map(2, shape, 2);
        let got = dense_cross_attention(&q, false, &[KvSource::semantic(&kv)], &cfg, &w).unwrap();
        assert!(rel_err(&got, &scalar_dense(&q, &kv, &cfg, &w)) < 1e-5);
    }

    #[test]
    fn constant_values_pass_through() {
        let shape = Shape3::cube(3).unwrap();
        let cfg = BamConfig::new(1, 6, 1).unwrap();
        let w = BamWeights::seeded(&cfg, 2, 1.0);
        let q = random_map(1, shape, 1);
        let kv = Volume::filled(1, shape, -0.4);
        let got = dense_cross_attention(&q, true, &[KvSource::autoregressive(&kv)], &cfg, &w).unwrap();
        assert!(got.as_slice().iter().all(|v| (v + 0.4).abs() < 1e-6));
    }
}
