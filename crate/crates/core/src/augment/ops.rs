//! The eight intensity operators.
//!
//! Each operator works on one channel at a time, on intensities min-max
//! rescaled to `[0, 1]` over the brain mask (voxels where any channel is
//! nonzero). Voxels outside the mask are left at their original value and
//! the rescaling is inverted afterwards.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Posterize,
    Solarize,
    Contrast,
    Sharpness,
    Brightness,
    Equalize,
    Invert,
    GaussianNoise,
}

impl Op {
    pub const ALL: [Op; 8] = [
        Op::Posterize,
        Op::Solarize,
        Op::Contrast,
        Op::Sharpness,
        Op::Brightness,
        Op::Equalize,
        Op::Invert,
        Op::GaussianNoise,
    ];
}

pub const MAX_MAGNITUDE: f64 = 10.0;

/// Histogram resolution for [`Op::Equalize`].
const EQUALIZE_BINS: usize = 256;

pub fn posterize_bits(m: f64) -> u32 {
    (8.0 - 0.6 * m).round() as u32
}

pub fn solarize_threshold(m: f64) -> f64 {
    1.0 - m / 10.0
}

pub fn contrast_factor(m: f64) -> f64 {
    1.0 + 0.09 * m
}

pub fn sharpness_amount(m: f64) -> f64 {
    0.1 * m
}

pub fn brightness_offset(m: f64) -> f64 {
    0.05 * m
}

pub fn noise_sigma(m: f64) -> f64 {
    0.02 * m
}

/// Voxels where any channel is nonzero.
pub fn brain_mask(x: &Volume) -> Vec<bool> {
    let n = x.voxels();
    (0..n)
        .map(|i| (0..x.channels).any(|c| x.data[c * n + i] != 0.0))
        .collect()
}

/// Applies `op` with magnitude `m` to every channel of `x`. `invert_contrast`
/// swaps the contrast factor for its reciprocal.
pub fn apply_op<R: Rng + ?Sized>(op: Op, m: f64, x: &Volume, invert_contrast: bool, rng: &mut R) -> Volume {
    let m = m.clamp(0.0, MAX_MAGNITUDE);
    let mask = brain_mask(x);
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let mut out = x.clone();
    for c in 0..x.channels {
        let chan = out.channel_mut(c);
        let (lo, hi) = idx
            .iter()
            .map(|&i| chan[i])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let range = hi - lo;
        if idx.is_empty() || !(range > 0.0) || !range.is_finite() {
            continue;
        }
        let mut v: Vec<f64> = idx.iter().map(|&i| (chan[i] - lo) / range).collect();
        match op {
            Op::Posterize => {
                let levels = (1u64 << posterize_bits(m).max(1)) as f64;
                for a in &mut v {
                    *a = (*a * levels).floor().min(levels - 1.0) / (levels - 1.0);
                }
            }
            Op::Solarize => {
                let t = solarize_threshold(m);
                for a in &mut v {
                    if *a > t {
                        *a = 1.0 - *a;
                    }
                }
            }
            Op::Contrast => {
                let f = contrast_factor(m);
                let f = if invert_contrast { 1.0 / f } else { f };
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                for a in &mut v {
                    *a = (mean + f * (*a - mean)).clamp(0.0, 1.0);
                }
            }
            Op::Sharpness => {
                let amount = sharpness_amount(m);
                let blurred = masked_box_blur(&v, &idx, &mask, x.dims);
                for (a, b) in v.iter_mut().zip(blurred) {
                    *a = (*a + amount * (*a - b)).clamp(0.0, 1.0);
                }
            }
            Op::Brightness => {
                let off = brightness_offset(m);
                for a in &mut v {
                    *a = (*a + off).clamp(0.0, 1.0);
                }
            }
            Op::Equalize => equalize(&mut v),
            Op::Invert => {
                for a in &mut v {
                    *a = 1.0 - *a;
                }
            }
            Op::GaussianNoise => {
                let sigma = noise_sigma(m);
                for a in &mut v {
                    let z: f64 = rng.sample(StandardNormal);
                    *a += sigma * z;
                }
            }
        }
        for (&i, a) in idx.iter().zip(v) {
            chan[i] = a * range + lo;
        }
    }
    out
}

/// Mean over the in-mask voxels of each voxel's 3x3x3 neighbourhood.
fn masked_box_blur(v: &[f64], idx: &[usize], mask: &[bool], dims: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut full = vec![0.0; mask.len()];
    for (&i, &a) in idx.iter().zip(v) {
        full[i] = a;
    }
    idx.iter()
        .map(|&i| {
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            let (mut sum, mut count) = (0.0, 0.0);
            for qz in z.saturating_sub(1)..(z + 2).min(d) {
                for qy in y.saturating_sub(1)..(y + 2).min(h) {
                    for qx in x.saturating_sub(1)..(x + 2).min(w) {
                        let q = (qz * h + qy) * w + qx;
                        if mask[q] {
                            sum += full[q];
                            count += 1.0;
                        }
                    }
                }
            }
            sum / count
        })
        .collect()
}

/// Maps each value to the normalized cumulative count of its histogram bin.
fn equalize(v: &mut [f64]) {
    let bin = |a: f64| ((a * EQUALIZE_BINS as f64) as usize).min(EQUALIZE_BINS - 1);
    let mut hist = [0usize; EQUALIZE_BINS];
    for &a in v.iter() {
        hist[bin(a)] += 1;
    }
    let mut cdf = [0usize; EQUALIZE_BINS];
    let mut run = 0;
    for (c, h) in cdf.iter_mut().zip(hist) {
        run += h;
        *c = run;
    }
    let first = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    let n = v.len();
    if n == first {
        return;
    }
    for a in v.iter_mut() {
        *a = (cdf[bin(*a)] - first) as f64 / (n - first) as f64;
    }
}
