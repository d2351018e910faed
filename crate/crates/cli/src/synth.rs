//! Seeded synthetic (image, label-or-clean) pairs for demos and self-tests.

use naicl_core::volume::{Shape3, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SyntheticKind {
    /// Bright ball on a dim background with its binary mask. Radius is
    /// drawn from a sixth to a third of the shortest axis when not given.
    SphereSeg { radius: Option<f64> },
    Ramp,
    GaussianNoise { sigma: f64 },
    SaltPepper { rho: f64 },
    BiasField,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub shape: Shape3,
    pub kind: SyntheticKind,
    pub seed: u64,
}

/// Smooth ramp in `[0, 1]` along the main diagonal.
fn ramp(shape: Shape3) -> Volume {
    let span = |n: usize| (n.max(2) - 1) as f32;
    Volume::from_fn(1, shape, |_, i, j, k| (i as f32 / span(shape.h) + j as f32 / span(shape.w) + k as f32 / span(shape.d)) / 3.0)
}

/// Returns `(image, label)` for segmentation kinds and `(degraded, clean)` otherwise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> (Volume, Volume) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shape = spec.shape;
    match spec.kind {
        SyntheticKind::SphereSeg { radius } => {
            let min_axis = shape.h.min(shape.w).min(shape.d) as f64;
            let r = radius.unwrap_or_else(|| rng.gen_range(min_axis / 6.0..=min_axis / 3.0).max(1.0));
            let centre = shape.as_array().map(|n| {
                let n = n as f64;
                if n - 1.0 > 2.0 * r {
                    rng.gen_range(r..=n - 1.0 - r)
                } else {
                    (n - 1.0) / 2.0
                }
            });
            let r2 = r * r;
            let label = Volume::from_fn(1, shape, |_, i, j, k| {
                let d2 = [i, j, k].iter().zip(&centre).map(|(&x, &c)| (x as f64 - c).powi(2)).sum::<f64>();
                if d2 <= r2 {
                    1.0
                } else {
                    0.0
                }
            });
            let noise = Normal::new(0.0f32, 0.05).expect("valid sigma");
            let image = Volume::from_fn(1, shape, |c, i, j, k| 0.2 + 0.6 * label.get(c, i, j, k) + noise.sample(&mut rng));
            (image, label)
        }
        SyntheticKind::Ramp => {
            let clean = ramp(shape);
            (clean.clone(), clean)
        }
        SyntheticKind::GaussianNoise { sigma } => {
            let clean = ramp(shape);
            let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
            let image = Volume::from_fn(1, shape, |c, i, j, k| clean.get(c, i, j, k) + noise.sample(&mut rng) as f32);
            (image, clean)
        }
        SyntheticKind::SaltPepper { rho } => {
            let clean = ramp(shape);
            let rho = rho.clamp(0.0, 1.0);
            let image = Volume::from_fn(1, shape, |c, i, j, k| {
                if rng.gen_bool(rho) {
                    if rng.gen_bool(0.5) {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    clean.get(c, i, j, k)
                }
            });
            (image, clean)
        }
        SyntheticKind::BiasField => {
            let clean = Volume::from_fn(1, shape, |_, i, j, k| 0.25 + 0.5 * clean_pattern(shape, i, j, k));
            let coef: Vec<f32> = (0..9).map(|_| rng.gen_range(-0.15..0.15)).collect();
            let unit = |x: usize, n: usize| if n > 1 { 2.0 * x as f32 / (n - 1) as f32 - 1.0 } else { 0.0 };
            let image = Volume::from_fn(1, shape, |c, i, j, k| {
                let (x, y, z) = (unit(i, shape.h), unit(j, shape.w), unit(k, shape.d));
                let field = 1.0
                    + coef[0] * x
                    + coef[1] * y
                    + coef[2] * z
                    + coef[3] * x * x
                    + coef[4] * y * y
                    + coef[5] * z * z
                    + coef[6] * x * y
                    + coef[7] * y * z
                    + coef[8] * x * z;
                clean.get(c, i, j, k) * field
            });
            (image, clean)
        }
    }
}

/// Blocky texture so a multiplicative field has something to distort.
fn clean_pattern(shape: Shape3, i: usize, j: usize, k: usize) -> f32 {
    let cell = (shape.max_extent() / 4).max(1);
    ((i / cell + j / cell + k / cell) % 2) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_volume_matches_analytic() {
        for (r, seed) in [(8.0, 1), (10.5, 2), (13.0, 3)] {
            let spec = SyntheticSpec { shape: Shape3::new(40, 36, 44).unwrap(), kind: SyntheticKind::SphereSeg { radius: Some(r) }, seed };
            let (_, label) = generate_synthetic(&spec);
            let count = label.as_slice().iter().filter(|&&v| v == 1.0).count() as f64;
            let analytic = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
            assert!((count / analytic - 1.0).abs() <= 0.10, "r={r}: {count} vs {analytic}");
        }
    }

    #[test]
    fn zero_rho_is_clean_and_generation_is_deterministic() {
        let shape = Shape3::new(9, 7, 5).unwrap();
        let (img, clean) = generate_synthetic(&SyntheticSpec { shape, kind: SyntheticKind::SaltPepper { rho: 0.0 }, seed: 4 });
        assert_eq!(img, clean);
        let kinds = [
            SyntheticKind::SphereSeg { radius: None },
            SyntheticKind::Ramp,
            SyntheticKind::GaussianNoise { sigma: 0.1 },
            SyntheticKind::SaltPepper { rho: 0.2 },
            SyntheticKind::BiasField,
        ];
        for kind in kinds {
            let spec = SyntheticSpec { shape, kind, seed: 11 };
            let a = generate_synthetic(&spec);
            assert_eq!(a, generate_synthetic(&spec), "{kind:?}");
            assert!(a.0.is_finite() && a.1.is_finite());
        }
    }

    #[test]
    fn degradations_change_the_image() {
        let shape = Shape3::new(8, 8, 8).unwrap();
        for kind in [SyntheticKind::GaussianNoise { sigma: 0.1 }, SyntheticKind::SaltPepper { rho: 0.3 }, SyntheticKind::BiasField] {
            let (img, clean) = generate_synthetic(&SyntheticSpec { shape, kind, seed: 5 });
            assert!(img.max_abs_diff(&clean) > 0.0, "{kind:?}");
        }
    }
}
