//! Multi-channel volumes, label maps, and the preprocessing pipeline
//! (cubic padding, resampling, non-zero intensity normalization).
//!
//! Spatial axes are ordered `[D, H, W]` with `W` varying fastest, and
//! `spacing[i]` is the voxel size in millimeters along axis `i`.

mod nifti;
mod svol;

pub use nifti::read_nifti;
pub use svol::{read_svol, read_svol_labels, read_svol_volume, write_svol, SvolData};

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("truncated payload: header declares {expected} bytes, file holds {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("payload length mismatch: header declares {expected} bytes, file holds {found}")]
    PayloadLength { expected: usize, found: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported feature: {0}")]
    UnsupportedFeature(String),
    #[error("invalid volume: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, VolumeError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub channels: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Channel-major, then `D`, `H`, `W`.
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub labels: Vec<u16>,
    pub class_count: u16,
}

/// One subject: a preprocessed multi-channel image and, when available, its
/// reference segmentation on the same grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub image: Volume,
    pub labels: Option<LabelMap>,
}

fn check_geometry(dims: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(VolumeError::Invalid(format!("zero extent in dims {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(VolumeError::Invalid(format!("non-positive spacing {spacing:?}")));
    }
    Ok(())
}

impl Volume {
    pub fn new(channels: usize, dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        if channels == 0 || data.len() != channels * dims.iter().product::<usize>() {
            return Err(VolumeError::Invalid(format!(
                "{} values for {channels} channels of {dims:?}",
                data.len()
            )));
        }
        Ok(Volume {
            channels,
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(channels: usize, dims: [usize; 3], spacing: [f64; 3]) -> Self {
        let n = channels * dims.iter().product::<usize>();
        Volume {
            channels,
            dims,
            spacing,
            data: vec![0.0; n],
        }
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Stacks single- or multi-channel volumes of identical geometry.
    pub fn concat_channels(parts: &[Volume]) -> Result<Volume> {
        let first = parts
            .first()
            .ok_or_else(|| VolumeError::Invalid("no modalities to concatenate".into()))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.dims != first.dims {
                return Err(VolumeError::Invalid(format!(
                    "modality dims {:?} differ from {:?}",
                    p.dims, first.dims
                )));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Volume::new(channels, first.dims, first.spacing, data)
    }

    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims;
        Tensor::new(vec![self.channels, d, h, w], self.data.clone()).expect("volume shape")
    }

    pub fn with_data(&self, data: Vec<f64>) -> Volume {
        debug_assert_eq!(data.len(), self.data.len());
        Volume {
            data,
            ..self.clone()
        }
    }
}

impl LabelMap {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], labels: Vec<u16>, class_count: u16) -> Result<Self> {
        check_geometry(dims, spacing)?;
        if labels.len() != dims.iter().product::<usize>() {
            return Err(VolumeError::Invalid(format!("{} labels for dims {dims:?}", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(VolumeError::Invalid(format!("label {bad} outside [0, {class_count})")));
        }
        Ok(LabelMap {
            dims,
            spacing,
            labels,
            class_count,
        })
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Rounds a single-channel intensity volume to labels; values must be
    /// non-negative integers.
    pub fn from_volume(v: &Volume) -> Result<Self> {
        if v.channels != 1 {
            return Err(VolumeError::Invalid(format!("label volume has {} channels", v.channels)));
        }
        let mut labels = Vec::with_capacity(v.data.len());
        for &x in &v.data {
            if !(x >= 0.0 && x.fract() == 0.0 && x < 65535.0) {
                return Err(VolumeError::Invalid(format!("non-integer label value {x}")));
            }
            labels.push(x as u16);
        }
        let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
        LabelMap::new(v.dims, v.spacing, labels, class_count)
    }
}

fn cube_offsets(dims: [usize; 3]) -> (usize, [usize; 3]) {
    let s = *dims.iter().max().expect("three dims");
    (s, dims.map(|d| (s - d) / 2))
}

fn pad_grid<T: Copy>(src: &[T], dims: [usize; 3], fill: T) -> (Vec<T>, [usize; 3]) {
    let (s, off) = cube_offsets(dims);
    let [d, h, w] = dims;
    let mut out = vec![fill; s * s * s];
    for z in 0..d {
        for y in 0..h {
            let srow = (z * h + y) * w;
            let drow = ((z + off[0]) * s + y + off[1]) * s + off[2];
            out[drow..drow + w].copy_from_slice(&src[srow..srow + w]);
        }
    }
    (out, [s, s, s])
}

/// Zero-pads to an `S^3` cube, `S = max(D, H, W)`. An odd deficit puts the
/// extra slice on the trailing side.
pub fn pad_to_cube(v: &Volume) -> Volume {
    let n = v.voxels();
    let mut data = Vec::new();
    let mut dims = v.dims;
    for c in 0..v.channels {
        let (p, d) = pad_grid(&v.data[c * n..(c + 1) * n], v.dims, 0.0);
        data.extend(p);
        dims = d;
    }
    Volume {
        channels: v.channels,
        dims,
        spacing: v.spacing,
        data,
    }
}

pub fn pad_labels_to_cube(l: &LabelMap) -> LabelMap {
    let (labels, dims) = pad_grid(&l.labels, l.dims, 0);
    LabelMap {
        dims,
        labels,
        ..l.clone()
    }
}

/// Corner-aligned source coordinate of target index `i`.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst <= 1 || src <= 1 {
        0.0
    } else {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

fn check_target(target: [usize; 3]) -> Result<()> {
    if target.iter().any(|&t| t == 0) {
        return Err(VolumeError::Invalid(format!("resample target {target:?} has a zero extent")));
    }
    Ok(())
}

fn rescaled_spacing(spacing: [f64; 3], src: [usize; 3], dst: [usize; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| spacing[a] * src[a] as f64 / dst[a] as f64)
}

/// Trilinear resampling with corner-aligned sampling (the first and last
/// voxel centers of source and target coincide). Spacing is rescaled so the
/// physical extent is preserved.
pub fn resample_trilinear(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    check_target(target)?;
    if target == v.dims {
        return Ok(v.clone());
    }
    let [d, h, w] = v.dims;
    let [td, th, tw] = target;
    let axis = |t: usize, n: usize, s: usize| -> Vec<(usize, usize, f64)> {
        (0..t)
            .map(|i| {
                let x = source_coord(i, n, s);
                let i0 = (x.floor() as usize).min(n - 1);
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, x - i0 as f64)
            })
            .collect()
    };
    let (az, ay, ax) = (axis(td, d, td), axis(th, h, th), axis(tw, w, tw));
    let n = v.voxels();
    let mut data = Vec::with_capacity(v.channels * td * th * tw);
    for c in 0..v.channels {
        let src = &v.data[c * n..(c + 1) * n];
        let at = |z: usize, y: usize, x: usize| src[(z * h + y) * w + x];
        for &(z0, z1, fz) in &az {
            for &(y0, y1, fy) in &ay {
                for &(x0, x1, fx) in &ax {
                    let c00 = at(z0, y0, x0) * (1.0 - fx) + at(z0, y0, x1) * fx;
                    let c01 = at(z0, y1, x0) * (1.0 - fx) + at(z0, y1, x1) * fx;
                    let c10 = at(z1, y0, x0) * (1.0 - fx) + at(z1, y0, x1) * fx;
                    let c11 = at(z1, y1, x0) * (1.0 - fx) + at(z1, y1, x1) * fx;
                    let c0 = c00 * (1.0 - fy) + c01 * fy;
                    let c1 = c10 * (1.0 - fy) + c11 * fy;
                    data.push(c0 * (1.0 - fz) + c1 * fz);
                }
            }
        }
    }
    Ok(Volume {
        channels: v.channels,
        dims: target,
        spacing: rescaled_spacing(v.spacing, v.dims, target),
        data,
    })
}

/// Nearest-neighbour counterpart of [`resample_trilinear`] for label maps.
pub fn resample_labels_nearest(l: &LabelMap, target: [usize; 3]) -> Result<LabelMap> {
    check_target(target)?;
    if target == l.dims {
        return Ok(l.clone());
    }
    let [d, h, w] = l.dims;
    let near = |t: usize, n: usize| -> Vec<usize> {
        (0..t)
            .map(|i| (source_coord(i, n, t).round() as usize).min(n - 1))
            .collect()
    };
    let (nz, ny, nx) = (near(target[0], d), near(target[1], h), near(target[2], w));
    let mut labels = Vec::with_capacity(target.iter().product());
    for &z in &nz {
        for &y in &ny {
            for &x in &nx {
                labels.push(l.labels[(z * h + y) * w + x]);
            }
        }
    }
    Ok(LabelMap {
        dims: target,
        spacing: rescaled_spacing(l.spacing, l.dims, target),
        labels,
        class_count: l.class_count,
    })
}

/// Per channel, standardizes voxels with `|v| > 0` to zero mean and unit
/// population standard deviation. Zero voxels stay exactly zero; a channel
/// whose spread is below `1e-8` is only centred.
pub fn normalize_nonzero(v: &Volume) -> Volume {
    let mut out = v.clone();
    for c in 0..v.channels {
        let ch = out.channel_mut(c);
        let (mut n, mut sum) = (0usize, 0.0);
        for &x in ch.iter().filter(|x| x.abs() > 0.0) {
            n += 1;
            sum += x;
        }
        if n == 0 {
            continue;
        }
        let mean = sum / n as f64;
        let var = ch
            .iter()
            .filter(|x| x.abs() > 0.0)
            .map(|x| (x - mean) * (x - mean))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        let scale = if std < 1e-8 { 1.0 } else { std };
        for x in ch.iter_mut().filter(|x| x.abs() > 0.0) {
            *x = (*x - mean) / scale;
        }
    }
    out
}

/// Pad, resample to `grid^3`, normalize.
pub fn preprocess(v: &Volume, grid: usize) -> Result<Volume> {
    let cube = pad_to_cube(v);
    let r = resample_trilinear(&cube, [grid; 3])?;
    Ok(normalize_nonzero(&r))
}

pub fn preprocess_labels(l: &LabelMap, grid: usize) -> Result<LabelMap> {
    resample_labels_nearest(&pad_labels_to_cube(l), [grid; 3])
}

/// Separable Gaussian smoothing with per-axis standard deviations in voxels.
/// Kernels are truncated at `ceil(3 sigma)` and renormalized; borders
/// replicate the edge voxel. An axis with `sigma <= 0` is left untouched.
pub fn gaussian_blur(v: &Volume, sigma: [f64; 3]) -> Volume {
    let mut out = v.clone();
    let [_, h, w] = v.dims;
    let strides = [h * w, w, 1];
    let n = v.voxels();
    let mut line = Vec::new();
    for axis in 0..3 {
        let s = sigma[axis];
        if s <= 0.0 {
            continue;
        }
        let r = (3.0 * s).ceil() as isize;
        let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * s * s)).exp()).collect();
        let total: f64 = k.iter().sum();
        k.iter_mut().for_each(|x| *x /= total);
        let len = v.dims[axis];
        let stride = strides[axis];
        for c in 0..v.channels {
            let ch = &mut out.data[c * n..(c + 1) * n];
            for start in 0..n {
                let pos = (start / stride) % len;
                if pos != 0 {
                    continue;
                }
                line.clear();
                line.extend((0..len).map(|i| ch[start + i * stride]));
                for i in 0..len {
                    let mut acc = 0.0;
                    for (j, kv) in k.iter().enumerate() {
                        let src = (i as isize + j as isize - r).clamp(0, len as isize - 1) as usize;
                        acc += kv * line[src];
                    }
                    ch[start + i * stride] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume {
        let n = dims.iter().product();
        Volume::new(1, dims, [1.0; 3], (0..n).map(|i| i as f64 + 1.0).collect()).unwrap()
    }

    #[test]
    fn blur_preserves_constants_and_is_symmetric() {
        let v = ramp([5, 6, 7]);
        assert_eq!(gaussian_blur(&v, [0.0; 3]), v);
        let c = Volume::new(2, [4, 5, 6], [1.0; 3], vec![1.5; 240]).unwrap();
        let b = gaussian_blur(&c, [0.7, 1.3, 0.4]);
        assert!(b.data.iter().all(|x| (x - 1.5).abs() < 1e-12));
        let mut data = vec![0.0; 9 * 9 * 9];
        data[(4 * 9 + 4) * 9 + 4] = 1.0;
        let imp = Volume::new(1, [9, 9, 9], [1.0; 3], data).unwrap();
        let b = gaussian_blur(&imp, [1.0; 3]);
        let at = |z: usize, y: usize, x: usize| b.data[(z * 9 + y) * 9 + x];
        assert!((at(3, 4, 4) - at(4, 4, 5)).abs() < 1e-15 && (at(3, 4, 4) - at(5, 4, 4)).abs() < 1e-15);
        assert!((b.data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(at(4, 4, 4) > at(3, 4, 4));
    }

    #[test]
    fn pad_already_cubic_is_unchanged() {
        let v = ramp([8, 8, 8]);
        assert_eq!(pad_to_cube(&v), v);
    }

    fn slice_is_zero(v: &Volume, z: usize) -> bool {
        let [_, h, w] = v.dims;
        v.data[z * h * w..(z + 1) * h * w].iter().all(|&x| x == 0.0)
    }

    #[test]
    fn pad_even_and_odd_deficit() {
        let p = pad_to_cube(&ramp([4, 8, 8]));
        assert_eq!(p.dims, [8, 8, 8]);
        assert!((0..2).chain(6..8).all(|z| slice_is_zero(&p, z)));
        assert!((2..6).all(|z| !slice_is_zero(&p, z)));

        let p = pad_to_cube(&ramp([5, 8, 8]));
        assert_eq!(p.dims, [8, 8, 8]);
        assert!(slice_is_zero(&p, 0));
        assert!((1..6).all(|z| !slice_is_zero(&p, z)));
        assert!(slice_is_zero(&p, 6) && slice_is_zero(&p, 7));
    }

    #[test]
    fn pad_preserves_original_voxels() {
        let v = Volume::new(2, [3, 5, 4], [1.0, 2.0, 0.5], (0..120).map(|i| i as f64).collect()).unwrap();
        let p = pad_to_cube(&v);
        let s = 5;
        let off = [1, 0, 0];
        for c in 0..2 {
            for z in 0..3 {
                for y in 0..5 {
                    for x in 0..4 {
                        let src = v.channel(c)[(z * 5 + y) * 4 + x];
                        let dst = p.channel(c)[((z + off[0]) * s + y + off[1]) * s + x + off[2]];
                        assert_eq!(src, dst);
                    }
                }
            }
        }
    }

    #[test]
    fn resample_identity_constant_and_ramp() {
        let v = ramp([4, 4, 4]);
        assert_eq!(resample_trilinear(&v, [4, 4, 4]).unwrap(), v);

        let c = Volume::new(1, [3, 3, 3], [1.0; 3], vec![2.5; 27]).unwrap();
        let r = resample_trilinear(&c, [7, 5, 6]).unwrap();
        assert!(r.data.iter().all(|&x| (x - 2.5).abs() < 1e-12));

        // f(z) = 3z + 1 along D; corner-aligned 2x upsampling of 5 -> 9 samples.
        let mut data = Vec::new();
        for z in 0..5 {
            data.extend(std::iter::repeat(3.0 * z as f64 + 1.0).take(4));
        }
        let v = Volume::new(1, [5, 2, 2], [1.0; 3], data).unwrap();
        let r = resample_trilinear(&v, [9, 2, 2]).unwrap();
        for z in 0..9 {
            let want = 3.0 * (z as f64 * 4.0 / 8.0) + 1.0;
            for k in 0..4 {
                assert!((r.data[z * 4 + k] - want).abs() < 1e-9);
            }
        }
        assert!(resample_trilinear(&v, [0, 2, 2]).is_err());
    }

    #[test]
    fn normalize_matches_population_statistics() {
        let v = Volume::new(1, [1, 1, 5], [1.0; 3], vec![0.0, 1.0, 2.0, 0.0, 3.0]).unwrap();
        let n = normalize_nonzero(&v);
        let s = (2.0f64 / 3.0).sqrt();
        let want = [0.0, -1.0 / s, 0.0, 0.0, 1.0 / s];
        for (a, b) in n.data.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((n.data[1] + 1.224_744_871_391_589).abs() < 1e-12);

        let z = Volume::zeros(1, [2, 2, 2], [1.0; 3]);
        assert_eq!(normalize_nonzero(&z), z);

        // A value landing exactly on the mean would leave the non-zero set, so
        // idempotence is checked on data without that coincidence.
        let v = Volume::new(1, [1, 1, 4], [1.0; 3], vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let n = normalize_nonzero(&v);
        let again = normalize_nonzero(&n);
        for (a, b) in again.data.iter().zip(&n.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn labels_resample_nearest_without_mixing() {
        let l = LabelMap::new([2, 2, 2], [1.0; 3], vec![0, 1, 2, 3, 3, 2, 1, 0], 4).unwrap();
        let r = resample_labels_nearest(&l, [5, 5, 5]).unwrap();
        assert!(r.labels.iter().all(|&x| x < 4));
        assert_eq!(r.labels[0], 0);
        assert_eq!(*r.labels.last().unwrap(), 0);
        assert!(LabelMap::new([1, 1, 1], [1.0; 3], vec![5], 4).is_err());
    }

    #[test]
    fn concat_requires_matching_dims() {
        let a = ramp([2, 2, 2]);
        let b = ramp([2, 2, 2]);
        let c = Volume::concat_channels(&[a.clone(), b]).unwrap();
        assert_eq!(c.channels, 2);
        assert!(Volume::concat_channels(&[a, ramp([2, 2, 3])]).is_err());
    }
}
