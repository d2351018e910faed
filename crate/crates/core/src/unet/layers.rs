//! Dense 3D building blocks: convolution, instance normalization, leaky ReLU.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::volume::{Shape3, Volume};

pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f32 = 0.01;

fn out_extent(n: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - kernel) / stride + 1
}

/// Output indices `o` whose input tap `o * stride + tap - pad` lands inside `[0, n)`.
fn valid_range(n: usize, out: usize, tap: usize, stride: usize, pad: usize) -> std::ops::Range<usize> {
    // o * stride + tap >= pad
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    // o * stride + tap - pad <= n - 1
    let hi = if n + pad > tap { (n + pad - tap - 1) / stride + 1 } else { 0 };
    lo.min(out)..hi.min(out)
}

/// Zero-padded 3D convolution. `weight` is `[out][in][kernel^3]`.
pub fn conv3d(
    x: &Volume,
    weight: &[f32],
    bias: &[f32],
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Volume> {
    let cin = x.channels();
    let k3 = kernel * kernel * kernel;
    if weight.len() != out_channels * cin * k3 || bias.len() != out_channels {
        return Err(invalid(format!(
            "convolution expects {}x{}x{k3} weights and {} biases, got {} and {}",
            out_channels,
            cin,
            out_channels,
            weight.len(),
            bias.len()
        )));
    }
    let s = x.shape();
    if s.h + 2 * pad < kernel || s.w + 2 * pad < kernel || s.d + 2 * pad < kernel {
        return Err(invalid(format!("input {s} smaller than kernel {kernel}")));
    }
    let os = Shape3::new(
        out_extent(s.h, kernel, stride, pad),
        out_extent(s.w, kernel, stride, pad),
        out_extent(s.d, kernel, stride, pad),
    )?;
    let plane = os.voxels();
    let mut out = vec![0.0f32; out_channels * plane];
    let taps: Vec<[std::ops::Range<usize>; 3]> = (0..k3)
        .map(|t| {
            let (a, b, c) = (t / (kernel * kernel), (t / kernel) % kernel, t % kernel);
            [
                valid_range(s.h, os.h, a, stride, pad),
                valid_range(s.w, os.w, b, stride, pad),
                valid_range(s.d, os.d, c, stride, pad),
            ]
        })
        .collect();

    out.par_chunks_mut(plane).enumerate().for_each(|(co, dst)| {
        dst.fill(bias[co]);
        for ci in 0..cin {
            let src = x.channel(ci);
            let wrow = &weight[(co * cin + ci) * k3..(co * cin + ci + 1) * k3];
            for (t, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let (a, b, c) = (t / (kernel * kernel), (t / kernel) % kernel, t % kernel);
                let [rh, rw, rd] = &taps[t];
                for oi in rh.clone() {
                    let ii = oi * stride + a - pad;
                    for oj in rw.clone() {
                        let jj = oj * stride + b - pad;
                        let orow = os.index(oi, oj, 0);
                        let irow = s.index(ii, jj, 0);
                        if stride == 1 {
                            let start = rd.start + c - pad;
                            let len = rd.len();
                            for (o, &v) in dst[orow + rd.start..orow + rd.end]
                                .iter_mut()
                                .zip(&src[irow + start..irow + start + len])
                            {
                                *o += wv * v;
                            }
                        } else {
                            for ok in rd.clone() {
                                dst[orow + ok] += wv * src[irow + ok * stride + c - pad];
                            }
                        }
                    }
                }
            }
        }
    });
    Volume::new(out_channels, os, out)
}

/// Per-channel normalization to zero mean and unit variance over space.
pub fn instance_norm(x: &mut Volume) {
    for c in 0..x.channels() {
        let ch = x.channel_mut(c);
        let n = ch.len() as f64;
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for v in ch.iter_mut() {
            *v = ((*v as f64 - mean) * inv) as f32;
        }
    }
}

pub fn leaky_relu(x: &mut Volume) {
    for v in x.as_mut_slice() {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}


#[cfg(test)]
mod tests {
    use super::oracle::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_matches_naive_for_strides_and_kernels() {
        let shape = Shape3::new(6, 5, 7).unwrap();
        let x = Volume::new(3, shape, rand_vec(3 * shape.voxels(), 1)).unwrap();
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let w = rand_vec(4 * 3 * k * k * k, 2);
            let b = rand_vec(4, 3);
            let fast = conv3d(&x, &w, &b, 4, k, stride, pad).unwrap();
            let slow = conv3d_naive(&x, &w, &b, 4, k, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-5, "k={k} s={stride}");
        }
    }

    #[test]
    fn stride_two_halves_even_extents() {
        let x = Volume::zeros(1, Shape3::cube(8).unwrap());
        let out = conv3d(&x, &vec![0.0; 27], &[0.0], 1, 3, 2, 1).unwrap();
        assert_eq!(out.shape(), Shape3::cube(4).unwrap());
    }

    #[test]
    fn conv_rejects_bad_weights() {
        let x = Volume::zeros(2, Shape3::cube(4).unwrap());
        assert!(conv3d(&x, &[0.0; 10], &[0.0], 1, 3, 1, 1).is_err());
    }

    #[test]
    fn norm_and_activation() {
        let shape = Shape3::new(3, 4, 5).unwrap();
        let x = Volume::new(2, shape, rand_vec(2 * shape.voxels(), 4)).unwrap();
        let mut y = x.clone();
        instance_norm(&mut y);
        assert!(y.max_abs_diff(&instance_norm_naive(&x)) < 1e-6);
        let mut z = Volume::zeros(1, shape);
        instance_norm(&mut z);
        assert!(z.as_slice().iter().all(|&v| v == 0.0));

        let mut a = Volume::new(1, Shape3::new(1, 1, 3).unwrap(), vec![-2.0, 0.0, 3.0]).unwrap();
        leaky_relu(&mut a);
        assert_eq!(a.as_slice(), &[-0.02, 0.0, 3.0]);
    }
}
