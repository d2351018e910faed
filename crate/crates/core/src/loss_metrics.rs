//! Smooth-L1 losses and the Dice / PSNR evaluation metrics.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::volume::Volume;

pub const DEFAULT_BETA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub value: f64,
    pub terms: Vec<(String, f64)>,
}

impl LossReport {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

fn check_congruent(a: &Volume, b: &Volume) -> Result<()> {
    if a.channels() != b.channels() || a.shape() != b.shape() {
        return Err(invalid(format!(
            "volumes differ: {}x{} vs {}x{}",
            a.channels(),
            a.shape(),
            b.channels(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(invalid(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

#[inline]
fn huber(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_pairs(pairs: impl Iterator<Item = (f32, f32)>, beta: f64) -> f64 {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (p, t) in pairs {
        sum += huber(p as f64 - t as f64, beta);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean smooth-L1 over all voxels.
pub fn smooth_l1(pred: &Volume, target: &Volume, beta: f64) -> Result<f64> {
    check_congruent(pred, target)?;
    check_beta(beta)?;
    Ok(smooth_l1_pairs(pred.as_slice().iter().copied().zip(target.as_slice().iter().copied()), beta))
}

/// Forward differences along `axis` (0 = h, 1 = w, 2 = d) of channel 0.
fn forward_diffs(v: &Volume, axis: usize) -> Vec<f32> {
    let s = v.shape();
    let ext = s.as_array();
    let x = v.channel(0);
    let mut out = Vec::new();
    if ext[axis] < 2 {
        return out;
    }
    let step = [s.w * s.d, s.d, 1][axis];
    for i in 0..s.h {
        for j in 0..s.w {
            for k in 0..s.d {
                if [i, j, k][axis] + 1 < ext[axis] {
                    let idx = s.index(i, j, k);
                    out.push(x[idx + step] - x[idx]);
                }
            }
        }
    }
    out
}

/// Smooth-L1 on intensities plus smooth-L1 on forward differences,
/// averaged over the three axes. An axis of extent 1 contributes 0.
pub fn intensity_diff_loss(pred: &Volume, target: &Volume, beta: f64) -> Result<LossReport> {
    check_congruent(pred, target)?;
    if pred.channels() != 1 {
        return Err(invalid(format!("expected a single channel, got {}", pred.channels())));
    }
    let intensity = smooth_l1(pred, target, beta)?;
    let diff = (0..3)
        .map(|axis| {
            let (p, t) = (forward_diffs(pred, axis), forward_diffs(target, axis));
            smooth_l1_pairs(p.into_iter().zip(t), beta)
        })
        .sum::<f64>()
        / 3.0;
    Ok(LossReport {
        value: intensity + diff,
        terms: vec![("intensity".into(), intensity), ("intensity_difference".into(), diff)],
    })
}

fn count_binary(v: &Volume) -> Result<usize> {
    let mut n = 0;
    for &x in v.as_slice() {
        if x == 1.0 {
            n += 1;
        } else if x != 0.0 {
            return Err(invalid(format!("mask value {x} is not 0 or 1")));
        }
    }
    Ok(n)
}

/// `2|P ∩ G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice(pred_mask: &Volume, gt_mask: &Volume) -> Result<f64> {
    check_congruent(pred_mask, gt_mask)?;
    let p = count_binary(pred_mask)?;
    let g = count_binary(gt_mask)?;
    if p + g == 0 {
        return Ok(1.0);
    }
    let both = pred_mask
        .as_slice()
        .iter()
        .zip(gt_mask.as_slice())
        .filter(|(&a, &b)| a == 1.0 && b == 1.0)
        .count();
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the volumes match.
pub fn psnr(pred: &Volume, target: &Volume, peak: f64) -> Result<f64> {
    check_congruent(pred, target)?;
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(invalid(format!("peak must be positive, got {peak}")));
    }
    let n = pred.as_slice().len() as f64;
    let mse = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}
