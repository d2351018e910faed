//! Blockwise cross-attention (BAM).
//!
//! Query and key/value maps are cut into `p x p x p` blocks. Each block's
//! query or key is the mean of its voxels, projected to width `m` and tagged
//! with a sine-cosine block position (plus a learned marker for blocks that
//! come from the autoregressive context). The softmax over the `p^3` block
//! tokens then mixes *unpooled* block contents, so attention cost depends on
//! the block count rather than the voxel count.
//!
//! Three kernels share the [`CrossAttention`] interface:
//! `bam` (the production path), `bam-oracle` (scalar nested loops, for
//! cross-checking) and `dense-voxel` (token-per-voxel attention, used as the
//! complexity baseline).

mod bench;
mod dense;
mod oracle;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::registry::{Named, Registry};
use crate::volume::{Shape3, Volume};

pub use bench::{bam_bench, bam_flops, dense_flops, growth_exponent, BenchReport, BenchRow, BenchSettings};
pub use dense::{dense_cross_attention, VoxelDense};
pub use oracle::{bam_dense_oracle, BlockwiseOracle};

/// Full-size defaults: 4 blocks per axis, projection width 66.
pub const DEFAULT_BLOCKS_PER_AXIS: usize = 4;
pub const DEFAULT_PROJ_WIDTH: usize = 66;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BamConfig {
    /// Blocks per axis, `p`. The module attends over `p^3` block tokens.
    pub blocks_per_axis: usize,
    /// Projection width `m`; a multiple of 6 so each axis gets `m/6` sine and
    /// `m/6` cosine slots.
    pub proj_width: usize,
    pub channels: usize,
}

impl BamConfig {
    pub fn new(blocks_per_axis: usize, proj_width: usize, channels: usize) -> Result<Self> {
        let cfg = Self { blocks_per_axis, proj_width, channels };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_axis == 0 {
            return Err(invalid("blocks_per_axis (p) must be >= 1"));
        }
        if self.proj_width < 6 || self.proj_width % 6 != 0 {
            return Err(invalid(format!(
                "proj_width (m) must be a positive multiple of 6, got {}",
                self.proj_width
            )));
        }
        if self.channels == 0 {
            return Err(invalid("channels (C) must be >= 1"));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.blocks_per_axis.pow(3)
    }
}

/// Learned parameters of one attention site. Matrices are `C x m`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BamWeights {
    pub w_q: Vec<f32>,
    pub w_k: Vec<f32>,
    pub r_ar: Vec<f32>,
}

impl BamWeights {
    pub fn zeros(cfg: &BamConfig) -> Self {
        let cm = cfg.channels * cfg.proj_width;
        Self { w_q: vec![0.0; cm], w_k: vec![0.0; cm], r_ar: vec![0.0; cfg.proj_width] }
    }

    /// Uniform(-scale, scale) entries from a seeded stream.
    pub fn seeded(cfg: &BamConfig, seed: u64, scale: f32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-scale..scale)).collect::<Vec<_>>();
        let cm = cfg.channels * cfg.proj_width;
        Self { w_q: draw(cm), w_k: draw(cm), r_ar: draw(cfg.proj_width) }
    }

    pub fn validate(&self, cfg: &BamConfig) -> Result<()> {
        let cm = cfg.channels * cfg.proj_width;
        if self.w_q.len() != cm || self.w_k.len() != cm || self.r_ar.len() != cfg.proj_width {
            return Err(invalid(format!(
                "attention weights do not match C={} m={}",
                cfg.channels, cfg.proj_width
            )));
        }
        if !self.w_q.iter().chain(&self.w_k).chain(&self.r_ar).all(|v| v.is_finite()) {
            return Err(invalid("attention weights contain non-finite values"));
        }
        Ok(())
    }
}

/// One key/value feature map and whether all of its blocks are autoregressive.
#[derive(Debug, Clone, Copy)]
pub struct KvSource<'a> {
    pub features: &'a Volume,
    pub is_autoregressive: bool,
}

impl<'a> KvSource<'a> {
    pub fn semantic(features: &'a Volume) -> Self {
        Self { features, is_autoregressive: false }
    }

    pub fn autoregressive(features: &'a Volume) -> Self {
        Self { features, is_autoregressive: true }
    }
}

/// A feature map regrouped into blocks.
///
/// Logically `C x N x p^3`; stored block-major (`[block][channel][voxel]`)
/// so that one block's full value content is a contiguous `C * N` row.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockView {
    channels: usize,
    blocks_per_axis: usize,
    block: Shape3,
    data: Vec<f32>,
}

impl BlockView {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn blocks(&self) -> usize {
        self.blocks_per_axis.pow(3)
    }

    /// Voxels per block, `N = h * w * d`.
    pub fn voxels_per_block(&self) -> usize {
        self.block.voxels()
    }

    pub fn block_shape(&self) -> Shape3 {
        self.block
    }

    /// Value row of block `b`: `C * N` entries, channel-major.
    pub fn row(&self, b: usize) -> &[f32] {
        let len = self.channels * self.block.voxels();
        &self.data[b * len..(b + 1) * len]
    }

    pub fn get(&self, c: usize, n: usize, b: usize) -> f32 {
        self.row(b)[c * self.block.voxels() + n]
    }

    /// Inverse of [`partition_blocks`].
    pub fn restore(&self) -> Volume {
        let p = self.blocks_per_axis;
        let bs = self.block;
        let shape = Shape3 { h: bs.h * p, w: bs.w * p, d: bs.d * p };
        let mut out = vec![0.0; self.channels * shape.voxels()];
        scatter_rows(&self.data, self.channels, p, bs, shape, &mut out);
        Volume::new(self.channels, shape, out).expect("restored layout is consistent")
    }
}

fn block_geometry(shape: Shape3, p: usize) -> Result<Shape3> {
    if p == 0 || shape.h % p != 0 || shape.w % p != 0 || shape.d % p != 0 {
        return Err(invalid(format!("extents {shape} are not divisible by p = {p}")));
    }
    Ok(Shape3 { h: shape.h / p, w: shape.w / p, d: shape.d / p })
}

/// Splits `x` into `p^3` non-overlapping blocks of `(H/p, W/p, D/p)` voxels.
pub fn partition_blocks(x: &Volume, p: usize) -> Result<BlockView> {
    let bs = block_geometry(x.shape(), p)?;
    let shape = x.shape();
    let channels = x.channels();
    let n = bs.voxels();
    let mut data = Vec::with_capacity(channels * shape.voxels());
    for bi in 0..p {
        for bj in 0..p {
            for bk in 0..p {
                for c in 0..channels {
                    let ch = x.channel(c);
                    for li in 0..bs.h {
                        for lj in 0..bs.w {
                            let start = shape.index(bi * bs.h + li, bj * bs.w + lj, bk * bs.d);
                            data.extend_from_slice(&ch[start..start + bs.d]);
                        }
                    }
                }
            }
        }
    }
    debug_assert_eq!(data.len(), p * p * p * channels * n);
    Ok(BlockView { channels, blocks_per_axis: p, block: bs, data })
}

fn scatter_rows(rows: &[f32], channels: usize, p: usize, bs: Shape3, shape: Shape3, out: &mut [f32]) {
    let n = bs.voxels();
    let vox = shape.voxels();
    let mut src = 0;
    for bi in 0..p {
        for bj in 0..p {
            for bk in 0..p {
                for c in 0..channels {
                    let ch = &mut out[c * vox..(c + 1) * vox];
                    for li in 0..bs.h {
                        for lj in 0..bs.w {
                            let start = shape.index(bi * bs.h + li, bj * bs.w + lj, bk * bs.d);
                            ch[start..start + bs.d].copy_from_slice(&rows[src..src + bs.d]);
                            src += bs.d;
                        }
                    }
                }
            }
        }
    }
    debug_assert_eq!(src, p * p * p * channels * n);
}

/// Mean over the voxels of each block. Returns `C x p^3`, channel-major.
pub fn pool_blocks(view: &BlockView) -> Vec<f32> {
    let b_count = view.blocks();
    let n = view.voxels_per_block();
    let mut pooled = vec![0.0f32; view.channels * b_count];
    for b in 0..b_count {
        let row = view.row(b);
        for c in 0..view.channels {
            let sum: f64 = row[c * n..(c + 1) * n].iter().map(|&v| v as f64).sum();
            pooled[c * b_count + b] = (sum / n as f64) as f32;
        }
    }
    pooled
}

/// 3D sine-cosine positional table, `p^3 x m` row-major.
///
/// Each axis gets `m/3` slots: `m/6` sines followed by `m/6` cosines of the
/// block index at frequencies `10000^(-2j/(m/3))`. Axis order is `h, w, d`.
pub fn sincos_pos_embed(p: usize, m: usize) -> Result<Vec<f32>> {
    if m == 0 || m % 6 != 0 {
        return Err(invalid(format!("embedding width {m} is not a positive multiple of 6")));
    }
    let third = m / 3;
    let half = m / 6;
    let freqs: Vec<f64> = (0..half)
        .map(|j| 1.0 / 10000f64.powf(2.0 * j as f64 / third as f64))
        .collect();
    let mut table = Vec::with_capacity(p * p * p * m);
    for bi in 0..p {
        for bj in 0..p {
            for bk in 0..p {
                for pos in [bi, bj, bk] {
                    let pos = pos as f64;
                    table.extend(freqs.iter().map(|f| (pos * f).sin() as f32));
                    table.extend(freqs.iter().map(|f| (pos * f).cos() as f32));
                }
            }
        }
    }
    Ok(table)
}

pub(crate) fn validate_inputs(
    query: &Volume,
    sources: &[KvSource<'_>],
    cfg: &BamConfig,
    w: &BamWeights,
) -> Result<()> {
    cfg.validate()?;
    w.validate(cfg)?;
    if sources.is_empty() {
        return Err(invalid("cross-attention needs at least one key/value source"));
    }
    if query.channels() != cfg.channels {
        return Err(invalid(format!(
            "query has {} channels, attention configured for {}",
            query.channels(),
            cfg.channels
        )));
    }
    for (i, s) in sources.iter().enumerate() {
        if s.features.shape() != query.shape() || s.features.channels() != query.channels() {
            return Err(invalid(format!(
                "source {i} has layout {}x{}, query is {}x{}",
                s.features.channels(),
                s.features.shape(),
                query.channels(),
                query.shape()
            )));
        }
    }
    block_geometry(query.shape(), cfg.blocks_per_axis)?;
    Ok(())
}

/// `pooled (C x B) . W (C x m) + P (+ R)`, giving `B x m`.
fn project_tokens(pooled: &[f32], w: &[f32], pos: &[f32], marker: Option<&[f32]>, b: usize, m: usize) -> Vec<f32> {
    let channels = w.len() / m;
    let mut out = pos.to_vec();
    for t in 0..b {
        let row = &mut out[t * m..(t + 1) * m];
        for c in 0..channels {
            let x = pooled[c * b + t];
            for (o, wv) in row.iter_mut().zip(&w[c * m..(c + 1) * m]) {
                *o += x * wv;
            }
        }
        if let Some(r) = marker {
            for (o, rv) in row.iter_mut().zip(r) {
                *o += rv;
            }
        }
    }
    out
}

/// Scaled block-level logits `Q^ K^T / sqrt(m)`, shape `B x (B * sources)`.
pub fn bam_logits(
    query: &Volume,
    query_is_ar: bool,
    sources: &[KvSource<'_>],
    cfg: &BamConfig,
    w: &BamWeights,
) -> Result<Vec<f32>> {
    validate_inputs(query, sources, cfg, w)?;
    let p = cfg.blocks_per_axis;
    let views: Vec<BlockView> = sources
        .iter()
        .map(|s| partition_blocks(s.features, p))
        .collect::<Result<_>>()?;
    let qview = partition_blocks(query, p)?;
    Ok(logits_from_views(&qview, query_is_ar, &views, sources, cfg, w))
}

fn logits_from_views(
    qview: &BlockView,
    query_is_ar: bool,
    views: &[BlockView],
    sources: &[KvSource<'_>],
    cfg: &BamConfig,
    w: &BamWeights,
) -> Vec<f32> {
    let b = cfg.blocks();
    let m = cfg.proj_width;
    let pos = sincos_pos_embed(cfg.blocks_per_axis, m).expect("validated width");
    let q_hat = project_tokens(&pool_blocks(qview), &w.w_q, &pos, query_is_ar.then_some(&w.r_ar[..]), b, m);
    let k_hat: Vec<f32> = views
        .iter()
        .zip(sources)
        .flat_map(|(v, s)| {
            project_tokens(&pool_blocks(v), &w.w_k, &pos, s.is_autoregressive.then_some(&w.r_ar[..]), b, m)
        })
        .collect();
    let keys = b * views.len();
    let scale = 1.0 / (m as f32).sqrt();
    let mut logits = vec![0.0f32; b * keys];
    for (qi, row) in logits.chunks_mut(keys).enumerate() {
        let q = &q_hat[qi * m..(qi + 1) * m];
        for (ki, out) in row.iter_mut().enumerate() {
            let k = &k_hat[ki * m..(ki + 1) * m];
            *out = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
        }
    }
    logits
}

/// In-place numerically stable softmax over each row of width `cols`.
pub(crate) fn softmax_rows(x: &mut [f32], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Block attention matrix `A`, `B x (B * sources)`, rows summing to one.
pub fn bam_attention(
    query: &Volume,
    query_is_ar: bool,
    sources: &[KvSource<'_>],
    cfg: &BamConfig,
    w: &BamWeights,
) -> Result<Vec<f32>> {
    let mut a = bam_logits(query, query_is_ar, sources, cfg, w)?;
    softmax_rows(&mut a, cfg.blocks() * sources.len());
    Ok(a)
}

/// Output rows above this many multiply-adds are computed in parallel.
const PARALLEL_MIN_WORK: usize = 1 << 18;

/// Blockwise cross-attention forward pass.
///
/// Keys from all sources are concatenated along the block axis, so the
/// softmax runs over `p^3 * sources.len()` tokens. Output block `b` is the
/// attention-weighted sum of the unpooled key blocks' contents.
pub fn bam_forward(
    query: &Volume,
    query_is_ar: bool,
    sources: &[KvSource<'_>],
    cfg: &BamConfig,
    w: &BamWeights,
) -> Result<Volume> {
    validate_inputs(query, sources, cfg, w)?;
    let p = cfg.blocks_per_axis;
    let qview = partition_blocks(query, p)?;
    let views: Vec<BlockView> = sources
        .iter()
        .map(|s| partition_blocks(s.features, p))
        .collect::<Result<_>>()?;
    let keys = cfg.blocks() * views.len();
    let mut attn = logits_from_views(&qview, query_is_ar, &views, sources, cfg, w);
    softmax_rows(&mut attn, keys);

    let row_len = qview.channels * qview.voxels_per_block();
    let b_count = cfg.blocks();
    let mix_row = |qi: usize, out: &mut [f32]| {
        let weights = &attn[qi * keys..(qi + 1) * keys];
        for (ki, &a) in weights.iter().enumerate() {
            let v = views[ki / b_count].row(ki % b_count);
            for (o, x) in out.iter_mut().zip(v) {
                *o += a * x;
            }
        }
    };
    let mut rows = vec![0.0f32; b_count * row_len];
    if b_count * keys * row_len >= PARALLEL_MIN_WORK {
        rows.par_chunks_mut(row_len).enumerate().for_each(|(qi, out)| mix_row(qi, out));
    } else {
        rows.chunks_mut(row_len).enumerate().for_each(|(qi, out)| mix_row(qi, out));
    }
    let shape = query.shape();
    let mut out = vec![0.0; query.channels() * shape.voxels()];
    scatter_rows(&rows, query.channels(), p, qview.block, shape, &mut out);
    Volume::new(query.channels(), shape, out)
}

/// A cross-attention kernel selectable by name.
pub trait CrossAttention: Named + Send + Sync {
    fn forward(
        &self,
        query: &Volume,
        query_is_ar: bool,
        sources: &[KvSource<'_>],
        cfg: &BamConfig,
        w: &BamWeights,
    ) -> Result<Volume>;
}

/// The production blockwise kernel.
#[derive(Debug, Default, Clone, Copy)]
pub struct Blockwise;

impl Named for Blockwise {
    fn name(&self) -> &'static str {
        "bam"
    }
}

impl CrossAttention for Blockwise {
    fn forward(
        &self,
        query: &Volume,
        query_is_ar: bool,
        sources: &[KvSource<'_>],
        cfg: &BamConfig,
        w: &BamWeights,
    ) -> Result<Volume> {
        bam_forward(query, query_is_ar, sources, cfg, w)
    }
}

pub type AttentionRegistry = Registry<dyn CrossAttention>;

/// Registry holding `bam`, `bam-oracle` and `dense-voxel`.
pub fn builtin_kernels() -> AttentionRegistry {
    let mut reg = AttentionRegistry::new("attention kernel");
    reg.register(Arc::new(Blockwise))
        .register(Arc::new(BlockwiseOracle))
        .register(Arc::new(VoxelDense));
    reg
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use proptest::prelude::*;

    fn cube(e: usize) -> Shape3 {
        Shape3::cube(e).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(BamConfig::new(4, 66, 32).is_ok());
        assert!(BamConfig::new(0, 66, 32).is_err());
        assert!(BamConfig::new(4, 64, 32).is_err());
        assert!(BamConfig::new(4, 0, 32).is_err());
        assert!(BamConfig::new(4, 6, 0).is_err());
    }

    #[test]
    fn partition_geometry() {
        let x = random_map(3, cube(8), 1);
        let v = partition_blocks(&x, 4).unwrap();
        assert_eq!(v.block_shape(), cube(2));
        assert_eq!(v.voxels_per_block(), 8);
        assert_eq!(v.blocks(), 64);
        let whole = partition_blocks(&x, 1).unwrap();
        assert_eq!(whole.blocks(), 1);
        assert_eq!(whole.row(0), x.as_slice());
        assert!(matches!(partition_blocks(&random_map(1, cube(6), 1), 4), Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn partition_matches_index_oracle() {
        let shape = Shape3::new(4, 6, 2).unwrap();
        let x = random_map(2, shape, 5);
        let v = partition_blocks(&x, 2).unwrap();
        let bs = Shape3::new(2, 3, 1).unwrap();
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..6 {
                    for k in 0..2 {
                        let b = ((i / 2) * 2 + j / 3) * 2 + k;
                        let n = bs.index(i % 2, j % 3, 0);
                        assert_eq!(v.get(c, n, b), x.get(c, i, j, k));
                    }
                }
            }
        }
        assert_eq!(v.restore(), x);
    }

    #[test]
    fn pooling_examples() {
        let c = Volume::filled(2, cube(4), 0.7);
        let pooled = pool_blocks(&partition_blocks(&c, 2).unwrap());
        assert!(pooled.iter().all(|&v| (v - 0.7).abs() < 1e-7));

        let ramp = Volume::from_fn(1, cube(2), |_, i, j, k| (i * 4 + j * 2 + k) as f32);
        let pooled = pool_blocks(&partition_blocks(&ramp, 1).unwrap());
        assert_eq!(pooled, vec![3.5]);
    }

    #[test]
    fn pooling_matches_loop_mean() {
        let x = random_map(3, cube(8), 2);
        let pooled = pool_blocks(&partition_blocks(&x, 2).unwrap());
        for c in 0..3 {
            for bi in 0..2 {
                for bj in 0..2 {
                    for bk in 0..2 {
                        let mut sum = 0.0f64;
                        for i in 0..4 {
                            for j in 0..4 {
                                for k in 0..4 {
                                    sum += x.get(c, bi * 4 + i, bj * 4 + j, bk * 4 + k) as f64;
                                }
                            }
                        }
                        let b = (bi * 2 + bj) * 2 + bk;
                        assert!((pooled[c * 8 + b] as f64 - sum / 64.0).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn positional_embedding_examples() {
        let m = 12;
        let pe = sincos_pos_embed(3, m).unwrap();
        assert_eq!(pe.len(), 27 * m);
        // Block (0,0,0): sines 0, cosines 1.
        for axis in 0..3 {
            let sub = &pe[axis * 4..axis * 4 + 4];
            assert_eq!(sub, &[0.0, 0.0, 1.0, 1.0]);
        }
        // Blocks (1,2,0) and (1,2,2) share their h and w sub-embeddings.
        let row = |bi: usize, bj: usize, bk: usize| &pe[((bi * 3 + bj) * 3 + bk) * m..][..m];
        assert_eq!(row(1, 2, 0)[..8], row(1, 2, 2)[..8]);
        assert_ne!(row(1, 2, 0)[8..], row(1, 2, 2)[8..]);
        assert!(sincos_pos_embed(2, 10).is_err());
    }

    #[test]
    fn positional_embedding_matches_scalar_recomputation() {
        let (p, m) = (4, 66);
        let pe = sincos_pos_embed(p, m).unwrap();
        for b in 0..p * p * p {
            let idx = [b / (p * p), (b / p) % p, b % p];
            for slot in 0..m {
                let axis = slot / 22;
                let within = slot % 22;
                let j = within % 11;
                let angle = idx[axis] as f64 / 10000f64.powf(j as f64 / 11.0);
                let want = if within < 11 { angle.sin() } else { angle.cos() };
                assert!((pe[b * m + slot] as f64 - want).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn constant_sources_give_constant_output() {
        let cfg = BamConfig::new(2, 6, 3).unwrap();
        let w = BamWeights::seeded(&cfg, 4, 0.5);
        let q = random_map(3, cube(4), 9);
        let kv = Volume::filled(3, cube(4), 0.25);
        let kv2 = kv.clone();
        let srcs = [KvSource::semantic(&kv), KvSource::autoregressive(&kv2)];
        let out = bam_forward(&q, false, &srcs, &cfg, &w).unwrap();
        assert!(out.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn single_block_returns_source() {
        let cfg = BamConfig::new(1, 6, 2).unwrap();
        let w = BamWeights::seeded(&cfg, 1, 0.5);
        let q = random_map(2, cube(3), 1);
        let kv = random_map(2, cube(3), 2);
        let out = bam_forward(&q, false, &[KvSource::semantic(&kv)], &cfg, &w).unwrap();
        assert_eq!(out, kv);
    }

    #[test]
    fn zero_projections_match_oracle() {
        let cfg = BamConfig::new(2, 12, 2).unwrap();
        let w = BamWeights::zeros(&cfg);
        let q = random_map(2, cube(4), 3);
        let kv = random_map(2, cube(4), 4);
        let srcs = [KvSource::semantic(&kv)];
        let fast = bam_forward(&q, false, &srcs, &cfg, &w).unwrap();
        let slow = bam_dense_oracle(&q, false, &srcs, &cfg, &w).unwrap();
        assert!(rel_err(&fast, &slow) < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = BamConfig::new(2, 6, 2).unwrap();
        let w = BamWeights::zeros(&cfg);
        let q = random_map(2, cube(4), 1);
        let other = random_map(2, Shape3::new(4, 4, 2).unwrap(), 1);
        assert!(bam_forward(&q, false, &[], &cfg, &w).is_err());
        assert!(bam_forward(&q, false, &[KvSource::semantic(&other)], &cfg, &w).is_err());
        let odd = random_map(2, cube(3), 1);
        assert!(bam_forward(&odd, false, &[KvSource::semantic(&odd)], &cfg, &w).is_err());
        let wrong_c = random_map(3, cube(4), 1);
        assert!(bam_forward(&wrong_c, false, &[KvSource::semantic(&wrong_c)], &cfg, &w).is_err());
    }

    #[test]
    fn ar_flag_toggles_logits_only_when_marker_nonzero() {
        let cfg = BamConfig::new(2, 6, 2).unwrap();
        let mut w = BamWeights::seeded(&cfg, 8, 0.5);
        let q = random_map(2, cube(4), 1);
        let kv = random_map(2, cube(4), 2);
        let l0 = bam_logits(&q, false, &[KvSource::semantic(&kv)], &cfg, &w).unwrap();
        let l1 = bam_logits(&q, false, &[KvSource::autoregressive(&kv)], &cfg, &w).unwrap();
        assert_ne!(l0, l1);
        w.r_ar.fill(0.0);
        let a = bam_forward(&q, false, &[KvSource::semantic(&kv)], &cfg, &w).unwrap();
        let b = bam_forward(&q, false, &[KvSource::autoregressive(&kv)], &cfg, &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn registry_lists_builtin_kernels() {
        let reg = builtin_kernels();
        assert_eq!(reg.names(), vec!["bam", "bam-oracle", "dense-voxel"]);
        let cfg = BamConfig::new(1, 6, 1).unwrap();
        let w = BamWeights::zeros(&cfg);
        let q = random_map(1, cube(2), 1);
        let out = reg.get("bam").unwrap().forward(&q, false, &[KvSource::semantic(&q)], &cfg, &w).unwrap();
        assert_eq!(out, q);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn partition_round_trip(seed in 0u64..10_000, p in 1usize..4, e in prop::array::uniform3(1usize..4)) {
            let shape = Shape3::new(e[0] * p, e[1] * p, e[2] * p).unwrap();
            let x = random_map(2, shape, seed);
            prop_assert_eq!(partition_blocks(&x, p).unwrap().restore(), x);
        }

        #[test]
        fn rows_sum_to_one_and_outputs_are_convex(seed in 0u64..10_000, nsrc in 1usize..4) {
            let cfg = BamConfig::new(2, 6, 2).unwrap();
            let w = BamWeights::seeded(&cfg, seed, 1.0);
            let q = random_map(2, cube(4), seed + 1);
            let maps: Vec<Volume> = (0..nsrc).map(|s| random_map(2, cube(4), seed + 10 + s as u64)).collect();
            let srcs: Vec<KvSource> = maps.iter().enumerate()
                .map(|(i, m)| KvSource { features: m, is_autoregressive: i == 1 })
                .collect();
            let a = bam_attention(&q, false, &srcs, &cfg, &w).unwrap();
            for row in a.chunks(8 * nsrc) {
                prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
            }
            // Each output voxel lies inside the envelope of the same in-block
            // position across all key blocks.
            let out = partition_blocks(&bam_forward(&q, false, &srcs, &cfg, &w).unwrap(), 2).unwrap();
            let views: Vec<BlockView> = maps.iter().map(|m| partition_blocks(m, 2).unwrap()).collect();
            let len = out.row(0).len();
            for slot in 0..len {
                let vals = views.iter().flat_map(|v| (0..8).map(move |b| v.row(b)[slot]));
                let (lo, hi) = vals.fold((f32::MAX, f32::MIN), |(l, h), x| (l.min(x), h.max(x)));
                for b in 0..8 {
                    let y = out.row(b)[slot];
                    prop_assert!(y >= lo - 1e-6 && y <= hi + 1e-6);
                }
            }
        }

        #[test]
        fn permuting_key_blocks_with_positions_is_equivariant(seed in 0u64..10_000) {
            // Swap two key blocks' contents and, consistently, the positional
            // rows used for keys: each query block's output stays the same.
            use oracle::oracle_forward_with_key_positions;
            let p = 2;
            let cfg = BamConfig::new(p, 6, 1).unwrap();
            let w = BamWeights::seeded(&cfg, seed, 1.0);
            let q = random_map(1, cube(4), seed);
            let kv = random_map(1, cube(4), seed + 3);
            let identity: Vec<usize> = (0..8).collect();
            let base = oracle_forward_with_key_positions(&q, &kv, &cfg, &w, &identity);
            let mut perm = identity.clone();
            perm.swap(1, 6);
            let view = partition_blocks(&kv, p).unwrap();
            let mut rows: Vec<f32> = Vec::new();
            for &b in &perm {
                rows.extend_from_slice(view.row(b));
            }
            let swapped = BlockView { data: rows, ..view.clone() }.restore();
            let moved = oracle_forward_with_key_positions(&q, &swapped, &cfg, &w, &perm);
            prop_assert!(rel_err(&moved, &base) < 1e-5);
        }

        #[test]
        fn repeated_runs_are_bitwise_identical(seed in 0u64..10_000) {
            let cfg = BamConfig::new(2, 6, 2).unwrap();
            let w = BamWeights::seeded(&cfg, seed, 1.0);
            let q = random_map(2, cube(4), seed);
            let kv = random_map(2, cube(4), seed + 1);
            let srcs = [KvSource::semantic(&kv), KvSource::autoregressive(&q)];
            prop_assert_eq!(bam_forward(&q, true, &srcs, &cfg, &w).unwrap(), bam_forward(&q, true, &srcs, &cfg, &w).unwrap());
        }
    }
}
