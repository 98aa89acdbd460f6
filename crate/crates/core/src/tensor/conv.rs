//! 3D cross-correlation kernels.
//!
//! Stride-1 convolutions that preserve the spatial extent go through the
//! direct kernels. Everything else uses im2col: output voxels are processed
//! in chunks of whole output planes, each chunk is unfolded into a
//! `(C_in * k^3) x n` column matrix and contracted with the kernel by a
//! single GEMM. Accumulation order is fixed in both paths, so results are
//! reproducible run to run.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

use super::{direct, Result, TensorError};

const CHUNK_TARGET: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub od: usize,
    pub oh: usize,
    pub ow: usize,
}

fn out_extent(axis: &str, n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = n + 2 * pad;
    if span < k {
        return Err(TensorError::Invalid {
            op: "conv3d",
            msg: format!("axis {axis}: extent {n} with padding {pad} is smaller than kernel {k}"),
        });
    }
    // Trailing taps that do not fit a full stride are dropped (floor).
    Ok((span - k) / stride + 1)
}

impl ConvGeom {
    pub fn new(x: &[usize], kernel: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [cin, d, h, w] = match x {
            [c, d, h, w] => [*c, *d, *h, *w],
            _ => {
                return Err(TensorError::Rank {
                    op: "conv3d",
                    expected: 4,
                    found: x.to_vec(),
                })
            }
        };
        let [cout, kcin, kd, kh, kw] = match kernel {
            [a, b, c, d, e] => [*a, *b, *c, *d, *e],
            _ => {
                return Err(TensorError::Rank {
                    op: "conv3d",
                    expected: 5,
                    found: kernel.to_vec(),
                })
            }
        };
        if kcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                axis: "input channels".into(),
                expected: kcin,
                found: cin,
            });
        }
        if kd != kh || kd != kw || kd % 2 == 0 {
            return Err(TensorError::Invalid {
                op: "conv3d",
                msg: format!("kernel must be cubic with odd extent, got {kd}x{kh}x{kw}"),
            });
        }
        if bias != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                axis: "bias length".into(),
                expected: cout,
                found: bias.iter().product(),
            });
        }
        if stride != 1 && stride != 2 {
            return Err(TensorError::Invalid {
                op: "conv3d",
                msg: format!("stride must be 1 or 2, got {stride}"),
            });
        }
        let k = kd;
        Ok(ConvGeom {
            cin,
            d,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            od: out_extent("D", d, k, stride, pad)?,
            oh: out_extent("H", h, k, stride, pad)?,
            ow: out_extent("W", w, k, stride, pad)?,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.cout, self.od, self.oh, self.ow]
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    /// Stride 1 with symmetric padding that preserves the spatial extent.
    fn is_same(&self) -> bool {
        self.stride == 1 && self.k % 2 == 1 && self.pad == self.k / 2
    }

    fn out_voxels(&self) -> usize {
        self.od * self.oh * self.ow
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let plane = self.oh * self.ow;
        let step = (CHUNK_TARGET / plane.max(1)).max(1);
        let od = self.od;
        (0..od).step_by(step).map(move |p0| (p0, (p0 + step).min(od)))
    }

    /// Visits every (column row, output row) pair of planes `[p0, p1)` as
    /// `f(col_offset, row_len, input_row_start, kw)`; `None` marks a row that
    /// falls entirely in the zero padding.
    #[inline]
    fn for_each_tap(&self, p0: usize, p1: usize, mut f: impl FnMut(usize, usize, Option<usize>, usize)) {
        let (k, s, pad) = (self.k, self.stride, self.pad as isize);
        let n = (p1 - p0) * self.oh * self.ow;
        for ci in 0..self.cin {
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = ((ci * k + kd) * k + kh) * k + kw;
                        for odi in p0..p1 {
                            let id = (odi * s + kd) as isize - pad;
                            for ohi in 0..self.oh {
                                let ih = (ohi * s + kh) as isize - pad;
                                let base = row * n + ((odi - p0) * self.oh + ohi) * self.ow;
                                if id < 0 || id >= self.d as isize || ih < 0 || ih >= self.h as isize {
                                    f(base, self.ow, None, 0);
                                    continue;
                                }
                                let xrow = ((ci * self.d + id as usize) * self.h + ih as usize) * self.w;
                                f(base, self.ow, Some(xrow), kw);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Output columns `[lo, hi)` whose tap `kw` lands inside the input row.
    #[inline]
    fn valid_cols(&self, kw: usize) -> (usize, usize) {
        let (s, pad) = (self.stride, self.pad);
        // iw = owi * s + kw - pad must satisfy 0 <= iw < w
        let lo = if kw >= pad { 0 } else { (pad - kw).div_ceil(s) };
        let hi = if self.w + pad > kw { (self.w + pad - kw).div_ceil(s).min(self.ow) } else { 0 };
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[f64], p0: usize, p1: usize, col: &mut [f64]) {
        let (s, pad) = (self.stride, self.pad);
        self.for_each_tap(p0, p1, |base, len, src, kw| {
            let dst = &mut col[base..base + len];
            match src {
                None => dst.fill(0.0),
                Some(xrow) => {
                    let (lo, hi) = self.valid_cols(kw);
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if lo == hi {
                        return;
                    }
                    let start = xrow + lo * s + kw - pad;
                    if s == 1 {
                        dst[lo..hi].copy_from_slice(&x[start..start + hi - lo]);
                    } else {
                        for (j, v) in dst[lo..hi].iter_mut().enumerate() {
                            *v = x[start + j * s];
                        }
                    }
                }
            }
        });
    }

    fn col2im(&self, col: &[f64], p0: usize, p1: usize, gx: &mut [f64]) {
        let (s, pad) = (self.stride, self.pad);
        self.for_each_tap(p0, p1, |base, _len, src, kw| {
            if let Some(xrow) = src {
                let (lo, hi) = self.valid_cols(kw);
                if lo == hi {
                    return;
                }
                let start = xrow + lo * s + kw - pad;
                let from = &col[base + lo..base + hi];
                if s == 1 {
                    for (g, v) in gx[start..start + hi - lo].iter_mut().zip(from) {
                        *g += v;
                    }
                } else {
                    for (j, v) in from.iter().enumerate() {
                        gx[start + j * s] += v;
                    }
                }
            }
        });
    }

    fn out_chunk<'a>(&self, out: &'a mut [f64], p0: usize, n: usize) -> ArrayViewMut2<'a, f64> {
        let v = self.out_voxels();
        let j0 = p0 * self.oh * self.ow;
        ArrayViewMut2::from_shape((self.cout, n).strides((v, 1)), &mut out[j0..])
            .expect("output chunk view")
    }

    fn out_chunk_ref<'a>(&self, out: &'a [f64], p0: usize, n: usize) -> ArrayView2<'a, f64> {
        let v = self.out_voxels();
        let j0 = p0 * self.oh * self.ow;
        ArrayView2::from_shape((self.cout, n).strides((v, 1)), &out[j0..]).expect("output chunk view")
    }
}

pub(crate) fn forward(g: &ConvGeom, x: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = if g.is_same() {
        direct::forward(x, g.cin, [g.d, g.h, g.w], kernel, g.cout, g.k)
    } else {
        gemm_forward(g, x, kernel)
    };
    let v = g.out_voxels();
    for (co, b) in bias.iter().enumerate() {
        for o in &mut out[co * v..(co + 1) * v] {
            *o += b;
        }
    }
    out
}

fn gemm_forward(g: &ConvGeom, x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let v = g.out_voxels();
    let rows = g.rows();
    let mut out = vec![0.0; g.cout * v];
    let wmat = ArrayView2::from_shape((g.cout, rows), kernel).expect("kernel view");
    let mut col = Vec::new();
    for (p0, p1) in g.chunks() {
        let n = (p1 - p0) * g.oh * g.ow;
        col.resize(rows * n, 0.0);
        g.im2col(x, p0, p1, &mut col);
        let colm = ArrayView2::from_shape((rows, n), &col[..]).expect("column view");
        let mut o = g.out_chunk(&mut out, p0, n);
        general_mat_mul(1.0, &wmat, &colm, 0.0, &mut o);
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn backward(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let [need_x, need_k, need_b] = need;
    let v = g.out_voxels();
    let gb = need_b.then(|| {
        (0..g.cout)
            .map(|co| grad_out[co * v..(co + 1) * v].iter().sum())
            .collect()
    });
    if g.is_same() {
        let dims = [g.d, g.h, g.w];
        return ConvGrads {
            input: need_x.then(|| direct::input_grad(grad_out, g.cout, dims, kernel, g.cin, g.k)),
            kernel: need_k.then(|| direct::kernel_grad(x, g.cin, dims, grad_out, g.cout, g.k)),
            bias: gb,
        };
    }
    let rows = g.rows();
    let mut gx = need_x.then(|| vec![0.0; g.cin * g.d * g.h * g.w]);
    let mut gk = need_k.then(|| vec![0.0; g.cout * rows]);
    let wmat = ArrayView2::from_shape((g.cout, rows), kernel).expect("kernel view");
    if need_x || need_k {
        let mut col = Vec::new();
        let mut gcol = Vec::new();
        for (p0, p1) in g.chunks() {
            let n = (p1 - p0) * g.oh * g.ow;
            let go = g.out_chunk_ref(grad_out, p0, n);
            if let Some(gk) = gk.as_mut() {
                col.resize(rows * n, 0.0);
                g.im2col(x, p0, p1, &mut col);
                let colm = ArrayView2::from_shape((rows, n), &col[..]).expect("column view");
                let mut gkm = ArrayViewMut2::from_shape((g.cout, rows), &mut gk[..]).expect("kernel grad view");
                general_mat_mul(1.0, &go, &colm.t(), 1.0, &mut gkm);
            }
            if let Some(gx) = gx.as_mut() {
                gcol.resize(rows * n, 0.0);
                let mut gcm = ArrayViewMut2::from_shape((rows, n), &mut gcol[..]).expect("column grad view");
                general_mat_mul(1.0, &wmat.t(), &go, 0.0, &mut gcm);
                g.col2im(&gcol, p0, p1, gx);
            }
        }
    }
    ConvGrads {
        input: gx,
        kernel: gk,
        bias: gb,
    }
}
