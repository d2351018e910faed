//! Channel-major 3D volumes of `f32` and the voxel-level operations the
//! inference pipeline is built from: quantile normalization, resampling,
//! padded cropping and weighted stitching.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Spatial extent of a volume, `(h, w, d)` voxels, all strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl Shape3 {
    pub fn new(h: usize, w: usize, d: usize) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 {
            return Err(invalid(format!("shape extents must be positive, got ({h}, {w}, {d})")));
        }
        h.checked_mul(w)
            .and_then(|hw| hw.checked_mul(d))
            .ok_or_else(|| invalid(format!("shape ({h}, {w}, {d}) overflows the address space")))?;
        Ok(Self { h, w, d })
    }

    pub fn cube(edge: usize) -> Result<Self> {
        Self::new(edge, edge, edge)
    }

    pub fn voxels(&self) -> usize {
        self.h * self.w * self.d
    }

    pub fn max_extent(&self) -> usize {
        self.h.max(self.w).max(self.d)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.h, self.w, self.d]
    }

    pub fn from_array(a: [usize; 3]) -> Result<Self> {
        Self::new(a[0], a[1], a[2])
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.w + j) * self.d + k
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.h, self.w, self.d)
    }
}

/// An axis-aligned box of voxels. The box may reach past the volume it is
/// applied to; consumers either pad or skip the out-of-range part.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region3 {
    pub origin: [usize; 3],
    pub extent: Shape3,
}

impl Region3 {
    pub fn new(origin: [usize; 3], extent: Shape3) -> Self {
        Self { origin, extent }
    }

    pub fn whole(shape: Shape3) -> Self {
        Self { origin: [0; 3], extent: shape }
    }

    /// True when every voxel of the region lies inside `shape`.
    pub fn fits(&self, shape: Shape3) -> bool {
        self.origin
            .iter()
            .zip(self.extent.as_array())
            .zip(shape.as_array())
            .all(|((&o, e), s)| o + e <= s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// A `C x H x W x D` volume stored channel-major, then row-major over space.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    channels: usize,
    shape: Shape3,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(channels: usize, shape: Shape3, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(invalid("volume needs at least one channel"));
        }
        if data.len() != channels * shape.voxels() {
            return Err(invalid(format!(
                "data length {} does not match {} channels of shape {}",
                data.len(),
                channels,
                shape
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { channels, shape, data })
    }

    pub fn zeros(channels: usize, shape: Shape3) -> Self {
        Self::filled(channels, shape, 0.0)
    }

    pub fn filled(channels: usize, shape: Shape3, value: f32) -> Self {
        assert!(channels > 0 && value.is_finite());
        Self { channels, shape, data: vec![value; channels * shape.voxels()] }
    }

    /// Builds a volume by evaluating `f(c, i, j, k)` at every voxel.
    pub fn from_fn(
        channels: usize,
        shape: Shape3,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * shape.voxels());
        for c in 0..channels {
            for i in 0..shape.h {
                for j in 0..shape.w {
                    for k in 0..shape.d {
                        data.push(f(c, i, j, k));
                    }
                }
            }
        }
        Self { channels, shape, data }
    }

    /// Stacks single- or multi-channel volumes of equal shape along the channel axis.
    pub fn concat_channels(parts: &[&Volume]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid("nothing to concatenate"))?;
        let shape = first.shape;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut channels = 0;
        for p in parts {
            if p.shape != shape {
                return Err(invalid(format!("cannot concatenate shapes {} and {}", shape, p.shape)));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { channels, shape, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.shape.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.shape.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copies out a single channel as its own volume.
    pub fn extract_channel(&self, c: usize) -> Volume {
        Volume { channels: 1, shape: self.shape, data: self.channel(c).to_vec() }
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize, k: usize) -> f32 {
        self.data[c * self.shape.voxels() + self.shape.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, k: usize, v: f32) {
        let n = self.shape.voxels();
        let idx = self.shape.index(i, j, k);
        self.data[c * n + idx] = v;
    }

    pub fn max_abs_diff(&self, other: &Volume) -> f32 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Linear-interpolation (type 7) quantile over every voxel of every channel.
pub fn percentile(v: &Volume, q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid(format!("quantile {q} outside [0, 1]")));
    }
    let mut sorted = v.data.clone();
    sorted.sort_unstable_by(f32::total_cmp);
    Ok(quantile_sorted(&sorted, q))
}

fn quantile_sorted(sorted: &[f32], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    let a = sorted[lo] as f64;
    let b = sorted[hi] as f64;
    a + (b - a) * frac
}

pub const NORMALIZE_LOW_QUANTILE: f64 = 0.02;
pub const NORMALIZE_HIGH_QUANTILE: f64 = 0.98;

/// Maps the 2nd..98th percentile range onto `[0, 1]`, clamping outside it.
/// A volume whose two percentiles coincide normalizes to all zeros.
pub fn normalize_percentile(v: &Volume) -> Volume {
    let mut sorted = v.data.clone();
    sorted.sort_unstable_by(f32::total_cmp);
    let lo = quantile_sorted(&sorted, NORMALIZE_LOW_QUANTILE);
    let hi = quantile_sorted(&sorted, NORMALIZE_HIGH_QUANTILE);
    let data = if hi > lo {
        let span = hi - lo;
        v.data
            .iter()
            .map(|&x| ((x as f64 - lo) / span).clamp(0.0, 1.0) as f32)
            .collect()
    } else {
        vec![0.0; v.data.len()]
    };
    Volume { channels: v.channels, shape: v.shape, data }
}

/// Default threshold applied to model outputs when a binary mask is needed.
pub const MASK_THRESHOLD: f32 = 0.5;

/// `1.0` where the voxel is strictly greater than `threshold`, else `0.0`.
pub fn binarize_mask(v: &Volume, threshold: f32) -> Result<Volume> {
    if v.channels != 1 {
        return Err(invalid(format!("mask must be single-channel, got {} channels", v.channels)));
    }
    let data = v.data.iter().map(|&x| if x > threshold { 1.0 } else { 0.0 }).collect();
    Ok(Volume { channels: 1, shape: v.shape, data })
}

/// Per-axis sampling table: lower index, upper index and fractional weight.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    let max = (n_in - 1) as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}

fn axis_nearest(n_in: usize, n_out: usize) -> Vec<usize> {
    let scale = n_in as f64 / n_out as f64;
    let max = (n_in - 1) as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            ((src + 0.5).floor() as usize).min(n_in - 1)
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Resamples every channel to `target` using half-voxel-centre alignment
/// (`src = (i + 0.5) * in / out - 0.5`, clamped to the valid range).
pub fn resample(v: &Volume, target: Shape3, mode: Interpolation) -> Volume {
    if target == v.shape {
        return v.clone();
    }
    let src = v.shape;
    let mut out = Vec::with_capacity(v.channels * target.voxels());
    match mode {
        Interpolation::Trilinear => {
            let th = axis_taps(src.h, target.h);
            let tw = axis_taps(src.w, target.w);
            let td = axis_taps(src.d, target.d);
            for c in 0..v.channels {
                let ch = v.channel(c);
                let at = |i: usize, j: usize, k: usize| ch[src.index(i, j, k)];
                for &(h0, h1, fh) in &th {
                    for &(w0, w1, fw) in &tw {
                        for &(d0, d1, fd) in &td {
                            let c00 = lerp(at(h0, w0, d0), at(h0, w0, d1), fd);
                            let c01 = lerp(at(h0, w1, d0), at(h0, w1, d1), fd);
                            let c10 = lerp(at(h1, w0, d0), at(h1, w0, d1), fd);
                            let c11 = lerp(at(h1, w1, d0), at(h1, w1, d1), fd);
                            let c0 = lerp(c00, c01, fw);
                            let c1 = lerp(c10, c11, fw);
                            out.push(lerp(c0, c1, fh));
                        }
                    }
                }
            }
        }
        Interpolation::Nearest => {
            let nh = axis_nearest(src.h, target.h);
            let nw = axis_nearest(src.w, target.w);
            let nd = axis_nearest(src.d, target.d);
            for c in 0..v.channels {
                let ch = v.channel(c);
                for &i in &nh {
                    for &j in &nw {
                        for &k in &nd {
                            out.push(ch[src.index(i, j, k)]);
                        }
                    }
                }
            }
        }
    }
    Volume { channels: v.channels, shape: target, data: out }
}

/// In-range part of one axis of a region, as `(start, length)`.
fn axis_overlap(origin: usize, extent: usize, size: usize) -> Option<(usize, usize)> {
    (origin < size).then(|| (origin, extent.min(size - origin)))
}

fn overlap(r: &Region3, shape: Shape3) -> Option<[(usize, usize); 3]> {
    let e = r.extent.as_array();
    let s = shape.as_array();
    Some([
        axis_overlap(r.origin[0], e[0], s[0])?,
        axis_overlap(r.origin[1], e[1], s[1])?,
        axis_overlap(r.origin[2], e[2], s[2])?,
    ])
}

/// Extracts `r` from `v`; voxels outside `v` read as `pad`.
pub fn crop(v: &Volume, r: Region3, pad: f32) -> Volume {
    if r.origin == [0; 3] && r.extent == v.shape {
        return v.clone();
    }
    let mut out = Volume::filled(v.channels, r.extent, pad);
    if let Some([(sh, lh), (sw, lw), (sd, ld)]) = overlap(&r, v.shape) {
        for c in 0..v.channels {
            let src = v.channel(c);
            let dst = out.channel_mut(c);
            for i in 0..lh {
                for j in 0..lw {
                    let s0 = v.shape.index(sh + i, sw + j, sd);
                    let d0 = r.extent.index(i, j, 0);
                    dst[d0..d0 + ld].copy_from_slice(&src[s0..s0 + ld]);
                }
            }
        }
    }
    out
}

/// Writes `patch` into `dst` at `r`, dropping the parts that fall outside `dst`.
pub fn paste(dst: &mut Volume, patch: &Volume, r: Region3) -> Result<()> {
    if dst.channels != patch.channels || patch.shape != r.extent {
        return Err(invalid("patch does not match destination channels or region extent"));
    }
    if let Some([(sh, lh), (sw, lw), (sd, ld)]) = overlap(&r, dst.shape) {
        let dshape = dst.shape;
        for c in 0..patch.channels {
            let src = patch.channel(c);
            let out = dst.channel_mut(c);
            for i in 0..lh {
                for j in 0..lw {
                    let s0 = r.extent.index(i, j, 0);
                    let d0 = dshape.index(sh + i, sw + j, sd);
                    out[d0..d0 + ld].copy_from_slice(&src[s0..s0 + ld]);
                }
            }
        }
    }
    Ok(())
}

/// Adds `patch * patch_w` into `dst[r]` and `patch_w` into `weights[r]`.
///
/// `weights` and `patch_w` either have one channel (shared by all data
/// channels) or as many channels as `dst`. Out-of-range parts are skipped.
pub fn accumulate(
    dst: &mut Volume,
    weights: &mut Volume,
    patch: &Volume,
    patch_w: &Volume,
    r: Region3,
) -> Result<()> {
    if dst.channels != patch.channels {
        return Err(invalid(format!(
            "channel mismatch: destination has {}, patch has {}",
            dst.channels, patch.channels
        )));
    }
    if weights.shape != dst.shape || patch.shape != r.extent || patch_w.shape != r.extent {
        return Err(invalid("accumulate shapes disagree with the region"));
    }
    if weights.channels != patch_w.channels
        || (weights.channels != 1 && weights.channels != dst.channels)
    {
        return Err(invalid(format!(
            "channel mismatch: weight buffer has {}, weight patch has {}",
            weights.channels, patch_w.channels
        )));
    }
    let Some([(sh, lh), (sw, lw), (sd, ld)]) = overlap(&r, dst.shape) else {
        return Ok(());
    };
    let shape = dst.shape;
    let n = shape.voxels();
    let pn = r.extent.voxels();
    for c in 0..dst.channels {
        let wc = if weights.channels == 1 { 0 } else { c };
        for i in 0..lh {
            for j in 0..lw {
                let p0 = r.extent.index(i, j, 0);
                let d0 = shape.index(sh + i, sw + j, sd);
                for k in 0..ld {
                    let w = patch_w.data[wc * pn + p0 + k];
                    dst.data[c * n + d0 + k] += patch.data[c * pn + p0 + k] * w;
                }
            }
        }
    }
    for c in 0..weights.channels {
        for i in 0..lh {
            for j in 0..lw {
                let p0 = r.extent.index(i, j, 0);
                let d0 = shape.index(sh + i, sw + j, sd);
                for k in 0..ld {
                    weights.data[c * n + d0 + k] += patch_w.data[c * pn + p0 + k];
                }
            }
        }
    }
    Ok(())
}

/// Divides an accumulated field by its accumulated weights. Voxels with zero
/// weight are left at zero.
pub fn normalize_by_weights(dst: &Volume, weights: &Volume) -> Result<Volume> {
    if weights.shape != dst.shape || (weights.channels != 1 && weights.channels != dst.channels) {
        return Err(invalid("weight buffer does not match the accumulated field"));
    }
    let n = dst.shape.voxels();
    let mut out = dst.clone();
    for c in 0..dst.channels {
        let wc = if weights.channels == 1 { 0 } else { c };
        let w = &weights.data[wc * n..(wc + 1) * n];
        for (v, &wt) in out.channel_mut(c).iter_mut().zip(w) {
            *v = if wt > 0.0 { *v / wt } else { 0.0 };
        }
    }
    Ok(out)
}

/// Double-precision stitching buffer for sliding-window outputs.
///
/// Sums of up to eight equal `f32` values are exact in `f64`, so a tiling of
/// identical overlapping predictions with unit weights reproduces the input
/// bit for bit after division.
#[derive(Debug, Clone)]
pub struct StitchBuffer {
    channels: usize,
    shape: Shape3,
    acc: Vec<f64>,
    weight: Vec<f64>,
}

impl StitchBuffer {
    pub fn new(channels: usize, shape: Shape3) -> Self {
        Self {
            channels,
            shape,
            acc: vec![0.0; channels * shape.voxels()],
            weight: vec![0.0; shape.voxels()],
        }
    }

    /// Adds `patch` weighted by the single-channel `profile` at `r`.
    pub fn add(&mut self, patch: &Volume, profile: &Volume, r: Region3) -> Result<()> {
        if patch.channels != self.channels {
            return Err(invalid(format!(
                "channel mismatch: buffer has {}, patch has {}",
                self.channels, patch.channels
            )));
        }
        if profile.channels != 1 || patch.shape != r.extent || profile.shape != r.extent {
            return Err(invalid("patch or weight profile does not match the region"));
        }
        let Some([(sh, lh), (sw, lw), (sd, ld)]) = overlap(&r, self.shape) else {
            return Ok(());
        };
        let n = self.shape.voxels();
        let pn = r.extent.voxels();
        for i in 0..lh {
            for j in 0..lw {
                let p0 = r.extent.index(i, j, 0);
                let d0 = self.shape.index(sh + i, sw + j, sd);
                for k in 0..ld {
                    let w = profile.data[p0 + k] as f64;
                    self.weight[d0 + k] += w;
                    for c in 0..self.channels {
                        self.acc[c * n + d0 + k] += patch.data[c * pn + p0 + k] as f64 * w;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Volume {
        let n = self.shape.voxels();
        let data = self
            .acc
            .iter()
            .enumerate()
            .map(|(idx, &a)| {
                let w = self.weight[idx % n];
                if w > 0.0 {
                    (a / w) as f32
                } else {
                    0.0
                }
            })
            .collect();
        Volume { channels: self.channels, shape: self.shape, data }
    }
}

const MV3D_MAGIC: &[u8; 4] = b"MV3D";
const MV3D_VERSION: u8 = 1;

fn mv3d_err(reason: impl Into<String>) -> Error {
    Error::Format { format: "MV3D", reason: reason.into() }
}

/// Serializes a volume in the MV3D raw layout (little-endian, 24-byte header).
pub fn write_mv3d<W: Write>(v: &Volume, mut out: W) -> Result<()> {
    let mut header = [0u8; 24];
    header[..4].copy_from_slice(MV3D_MAGIC);
    header[4] = MV3D_VERSION;
    let dims = [v.channels, v.shape.h, v.shape.w, v.shape.d];
    for (slot, dim) in header[8..].chunks_exact_mut(4).zip(dims) {
        let dim = u32::try_from(dim).map_err(|_| mv3d_err("dimension exceeds u32"))?;
        slot.copy_from_slice(&dim.to_le_bytes());
    }
    out.write_all(&header)?;
    let mut payload = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

pub fn read_mv3d<R: Read>(mut input: R) -> Result<Volume> {
    let mut header = [0u8; 24];
    input
        .read_exact(&mut header)
        .map_err(|_| mv3d_err("truncated header"))?;
    if &header[..4] != MV3D_MAGIC {
        return Err(mv3d_err("bad magic"));
    }
    if header[4] != MV3D_VERSION {
        return Err(mv3d_err(format!("unsupported version {}", header[4])));
    }
    let mut dims = [0usize; 4];
    for (d, chunk) in dims.iter_mut().zip(header[8..].chunks_exact(4)) {
        *d = u32::from_le_bytes(chunk.try_into().unwrap()) as usize;
    }
    let [c, h, w, d] = dims;
    let shape = Shape3::new(h, w, d).map_err(|e| mv3d_err(e.to_string()))?;
    if c == 0 {
        return Err(mv3d_err("zero channels"));
    }
    let count = c
        .checked_mul(shape.voxels())
        .ok_or_else(|| mv3d_err("payload size overflows"))?;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    if payload.len() < count * 4 {
        return Err(mv3d_err(format!(
            "truncated payload: expected {} bytes, found {}",
            count * 4,
            payload.len()
        )));
    }
    if payload.len() > count * 4 {
        return Err(mv3d_err("trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Volume::new(c, shape, data).map_err(|e| mv3d_err(e.to_string()))
}

pub fn save_mv3d(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_mv3d(v, BufWriter::new(File::create(path)?))
}

pub fn load_mv3d(path: impl AsRef<Path>) -> Result<Volume> {
    read_mv3d(BufReader::new(File::open(path)?))
}
