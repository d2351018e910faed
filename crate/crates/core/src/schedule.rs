//! Coarse-to-fine step ladder, per-step sliding-window plans and the map from
//! a fine tile to the coarse region that seeds its autoregressive context.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::volume::{Region3, Shape3, Volume};

/// Default overlap between neighbouring sliding windows.
pub const DEFAULT_OVERLAP: f64 = 0.25;

fn check_patch_edge(patch_edge: usize) -> Result<()> {
    if patch_edge < 2 || patch_edge % 2 != 0 {
        return Err(invalid(format!("patch edge must be even and >= 2, got {patch_edge}")));
    }
    Ok(())
}

fn check_overlap(overlap: f64) -> Result<()> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(invalid(format!("overlap fraction {overlap} outside [0, 1)")));
    }
    Ok(())
}

/// Smallest `T >= 1` with `max(h, w, d) <= patch_edge * 2^(T-1)`.
///
/// Evaluated by integer comparison so exact powers of two never misround.
pub fn num_steps(shape: Shape3, patch_edge: usize) -> usize {
    assert!(patch_edge >= 1);
    let longest = shape.max_extent() as u128;
    let mut reach = patch_edge as u128;
    let mut steps = 1;
    while longest > reach {
        reach *= 2;
        steps += 1;
    }
    steps
}

/// Extents at 1-based step `t` of `total`: `ceil(axis / 2^(total - t))`.
pub fn step_dims(shape: Shape3, total: usize, t: usize) -> Result<Shape3> {
    if t == 0 || t > total {
        return Err(invalid(format!("step {t} outside 1..={total}")));
    }
    let shift = (total - t) as u32;
    let down = |x: usize| -> usize {
        if shift >= usize::BITS {
            1
        } else {
            x.div_ceil(1usize << shift)
        }
    };
    Shape3::new(down(shape.h), down(shape.w), down(shape.d))
}

/// The full resolution ladder for one input volume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScaleSchedule {
    steps: usize,
    dims: Vec<Shape3>,
    patch_edge: usize,
}

impl ScaleSchedule {
    pub fn new(shape: Shape3, patch_edge: usize) -> Result<Self> {
        check_patch_edge(patch_edge)?;
        let steps = num_steps(shape, patch_edge);
        let dims = (1..=steps)
            .map(|t| step_dims(shape, steps, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { steps, dims, patch_edge })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn patch_edge(&self) -> usize {
        self.patch_edge
    }

    /// Extents at 1-based step `t`.
    pub fn dims(&self, t: usize) -> Shape3 {
        self.dims[t - 1]
    }

    pub fn all_dims(&self) -> &[Shape3] {
        &self.dims
    }
}

/// Origins of one axis: first at 0, last flush with the far border, evenly
/// spaced with stride at most `patch_edge * (1 - overlap)`.
fn axis_origins(extent: usize, patch_edge: usize, overlap: f64) -> Vec<usize> {
    if extent <= patch_edge {
        return vec![0];
    }
    let stride = ((patch_edge as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let span = extent - patch_edge;
    let intervals = span.div_ceil(stride);
    (0..=intervals).map(|k| k * span / intervals).collect()
}

/// Sliding-window decomposition of one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TilePlan {
    pub dims: Shape3,
    pub patch_edge: usize,
    pub overlap_fraction: f64,
    pub origins: Vec<[usize; 3]>,
}

impl TilePlan {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn region(&self, tile: usize) -> Region3 {
        Region3::new(self.origins[tile], Shape3::cube(self.patch_edge).expect("positive edge"))
    }

    pub fn blend_profile(&self) -> Volume {
        blend_profile(self.patch_edge, self.overlap_fraction).expect("validated at planning time")
    }
}

/// Covers `dims` with `patch_edge`-cubed windows. Origins come out in
/// lexicographic `(h, w, d)` order. An axis shorter than the patch gets a
/// single origin-0 window that reaches past the border (the caller pads).
pub fn plan_tiles(dims: Shape3, patch_edge: usize, overlap_fraction: f64) -> Result<TilePlan> {
    check_overlap(overlap_fraction)?;
    if patch_edge == 0 {
        return Err(invalid("patch edge must be positive"));
    }
    let oh = axis_origins(dims.h, patch_edge, overlap_fraction);
    let ow = axis_origins(dims.w, patch_edge, overlap_fraction);
    let od = axis_origins(dims.d, patch_edge, overlap_fraction);
    let mut origins = Vec::with_capacity(oh.len() * ow.len() * od.len());
    for &h in &oh {
        for &w in &ow {
            for &d in &od {
                origins.push([h, w, d]);
            }
        }
    }
    Ok(TilePlan { dims, patch_edge, overlap_fraction, origins })
}

/// Coarse-step region feeding the autoregressive context of one fine tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArCrop {
    /// Region in previous-step coordinates, extent `(I/2)^3`.
    pub parent_region: Region3,
    /// Extent the crop is upsampled to, `I^3`.
    pub target_extent: Shape3,
    /// Per axis, whether the parent region overruns the previous step and
    /// must be zero-padded.
    pub padded: [bool; 3],
}

pub fn ar_crop_for_tile(tile_origin: [usize; 3], patch_edge: usize, prev_dims: Shape3) -> Result<ArCrop> {
    check_patch_edge(patch_edge)?;
    let half = patch_edge / 2;
    let origin = tile_origin.map(|o| o / 2);
    let prev = prev_dims.as_array();
    let padded = [0, 1, 2].map(|a| origin[a] + half > prev[a]);
    Ok(ArCrop {
        parent_region: Region3::new(origin, Shape3::cube(half)?),
        target_extent: Shape3::cube(patch_edge)?,
        padded,
    })
}

/// Per-axis weight: ramps `1/(r+1), 2/(r+1), ..` over `r` voxels at each face.
fn axis_profile(patch_edge: usize, ramp: usize) -> Vec<f64> {
    let denom = (ramp + 1) as f64;
    (0..patch_edge)
        .map(|j| {
            let from_start = (j + 1) as f64 / denom;
            let from_end = (patch_edge - j) as f64 / denom;
            from_start.min(from_end).min(1.0)
        })
        .collect()
}

/// Separable trapezoid blend weights for one `patch_edge`-cubed window.
/// The ramp at each face is `floor(patch_edge * overlap / 2)` voxels wide.
pub fn blend_profile(patch_edge: usize, overlap_fraction: f64) -> Result<Volume> {
    check_overlap(overlap_fraction)?;
    let shape = Shape3::cube(patch_edge)?;
    let ramp = (patch_edge as f64 * overlap_fraction / 2.0).floor() as usize;
    let axis = axis_profile(patch_edge, ramp);
    Ok(Volume::from_fn(1, shape, |_, i, j, k| (axis[i] * axis[j] * axis[k]) as f32))
}
