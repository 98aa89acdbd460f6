//! Direct stride-1 "same" convolution kernels.
//!
//! The input is copied into a zero-padded buffer so that, for a fixed output
//! row, every kernel tap reads a contiguous run of the buffer. Outputs are
//! accumulated in small register blocks of `CO x OW` values over all input
//! channels and taps in a fixed order, so results do not depend on the
//! instruction set chosen at runtime.

const CO: usize = 4;
const OW: usize = 8;

/// Zero-padded copy of a `[c, d, h, w]` tensor with `p` voxels on every side,
/// followed by `OW` spare zeros so block loads never run past the end.
struct Padded {
    data: Vec<f64>,
    wp: usize,
    plane: usize,
    chan: usize,
}

impl Padded {
    fn new(x: &[f64], c: usize, [d, h, w]: [usize; 3], p: usize) -> Self {
        let (dp, hp, wp) = (d + 2 * p, h + 2 * p, w + 2 * p);
        let plane = hp * wp;
        let chan = dp * plane;
        let mut data = vec![0.0; c * chan + OW];
        for ci in 0..c {
            for z in 0..d {
                for y in 0..h {
                    let src = ((ci * d + z) * h + y) * w;
                    let dst = ci * chan + (z + p) * plane + (y + p) * wp + p;
                    data[dst..dst + w].copy_from_slice(&x[src..src + w]);
                }
            }
        }
        Padded {
            data,
            wp,
            plane,
            chan,
        }
    }

    fn tap_offsets(&self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k * k * k);
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    out.push(kd * self.plane + kh * self.wp + kw);
                }
            }
        }
        out
    }
}

/// Kernel `[cout, cin, t]` rearranged to `[cin, t, cout_padded]`, with
/// `flip` reversing the tap order and swapping the channel roles (the
/// adjoint convolution).
fn arrange(kernel: &[f64], cout: usize, cin: usize, taps: usize, flip: bool) -> (Vec<f64>, usize) {
    let (a, b) = if flip { (cin, cout) } else { (cout, cin) };
    let ap = a.div_ceil(CO) * CO;
    let mut out = vec![0.0; b * taps * ap];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..taps {
                let v = kernel[(co * cin + ci) * taps + t];
                let (o, i, tt) = if flip { (ci, co, taps - 1 - t) } else { (co, ci, t) };
                out[(i * taps + tt) * ap + o] = v;
            }
        }
    }
    (out, ap)
}

#[inline(always)]
fn block_fma(acc: &mut [[f64; OW]; CO], ws: &[f64], xs: &[f64]) {
    let ws: &[f64; CO] = ws.try_into().expect("weight block");
    let xs: &[f64; OW] = xs.try_into().expect("input block");
    for c in 0..CO {
        for j in 0..OW {
            acc[c][j] += ws[c] * xs[j];
        }
    }
}

#[inline(always)]
fn conv_rows(
    xp: &Padded,
    cin: usize,
    cout: usize,
    [d, h, w]: [usize; 3],
    offs: &[usize],
    wt: &[f64],
    ap: usize,
    out: &mut [f64],
) {
    let taps = offs.len();
    let v = d * h * w;
    for z in 0..d {
        for y in 0..h {
            let row0 = z * xp.plane + y * xp.wp;
            for co0 in (0..cout).step_by(CO) {
                for j0 in (0..w).step_by(OW) {
                    let mut acc = [[0.0f64; OW]; CO];
                    for ci in 0..cin {
                        let xrow = &xp.data[ci * xp.chan + row0 + j0..];
                        let wrow = &wt[ci * taps * ap + co0..];
                        for (t, &off) in offs.iter().enumerate() {
                            block_fma(&mut acc, &wrow[t * ap..t * ap + CO], &xrow[off..off + OW]);
                        }
                    }
                    let cn = CO.min(cout - co0);
                    let jn = OW.min(w - j0);
                    for (c, a) in acc.iter().enumerate().take(cn) {
                        let o = (co0 + c) * v + (z * h + y) * w + j0;
                        out[o..o + jn].copy_from_slice(&a[..jn]);
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_rows_avx2(
    xp: &Padded,
    cin: usize,
    cout: usize,
    dims: [usize; 3],
    offs: &[usize],
    wt: &[f64],
    ap: usize,
    out: &mut [f64],
) {
    conv_rows(xp, cin, cout, dims, offs, wt, ap, out)
}

fn dispatch(xp: &Padded, cin: usize, cout: usize, dims: [usize; 3], offs: &[usize], wt: &[f64], ap: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * dims.iter().product::<usize>()];
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        unsafe { conv_rows_avx2(xp, cin, cout, dims, offs, wt, ap, &mut out) };
        return out;
    }
    conv_rows(xp, cin, cout, dims, offs, wt, ap, &mut out);
    out
}

/// `out[co] = sum_{ci, t} kernel[co, ci, t] * x[ci, p + t - k/2]`, without bias.
pub(crate) fn forward(x: &[f64], cin: usize, dims: [usize; 3], kernel: &[f64], cout: usize, k: usize) -> Vec<f64> {
    let xp = Padded::new(x, cin, dims, k / 2);
    let (wt, ap) = arrange(kernel, cout, cin, k * k * k, false);
    dispatch(&xp, cin, cout, dims, &xp.tap_offsets(k), &wt, ap)
}

/// Gradient with respect to the input: the same convolution applied to
/// `grad_out` with the kernel flipped and transposed.
pub(crate) fn input_grad(grad_out: &[f64], cout: usize, dims: [usize; 3], kernel: &[f64], cin: usize, k: usize) -> Vec<f64> {
    let gp = Padded::new(grad_out, cout, dims, k / 2);
    let (wt, ap) = arrange(kernel, cout, cin, k * k * k, true);
    dispatch(&gp, cout, cin, dims, &gp.tap_offsets(k), &wt, ap)
}

#[inline(always)]
fn kernel_grad_impl(xp: &Padded, cin: usize, grad_out: &[f64], cout: usize, [d, h, w]: [usize; 3], offs: &[usize]) -> Vec<f64> {
    let taps = offs.len();
    let v = d * h * w;
    let full = w / OW * OW;
    // One OW-wide partial sum per kernel entry, reduced at the end.
    let mut wide = vec![[0.0f64; OW]; cout * cin * taps];
    let mut tail = vec![0.0f64; cout * cin * taps];
    for z in 0..d {
        for y in 0..h {
            let gb = (z * h + y) * w;
            for ci in 0..cin {
                let xrow = &xp.data[ci * xp.chan + z * xp.plane + y * xp.wp..];
                for (t, &off) in offs.iter().enumerate() {
                    let xs = &xrow[off..off + w];
                    for co in 0..cout {
                        let gs = &grad_out[co * v + gb..co * v + gb + w];
                        let e = (co * cin + ci) * taps + t;
                        let mut acc = wide[e];
                        for j0 in (0..full).step_by(OW) {
                            let g8: &[f64; OW] = gs[j0..j0 + OW].try_into().expect("block");
                            let x8: &[f64; OW] = xs[j0..j0 + OW].try_into().expect("block");
                            for j in 0..OW {
                                acc[j] += g8[j] * x8[j];
                            }
                        }
                        wide[e] = acc;
                        for j in full..w {
                            tail[e] += gs[j] * xs[j];
                        }
                    }
                }
            }
        }
    }
    wide.iter().zip(tail).map(|(a, t)| a.iter().sum::<f64>() + t).collect()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn kernel_grad_avx2(xp: &Padded, cin: usize, grad_out: &[f64], cout: usize, dims: [usize; 3], offs: &[usize]) -> Vec<f64> {
    kernel_grad_impl(xp, cin, grad_out, cout, dims, offs)
}

/// `gk[co, ci, t] = sum_p grad_out[co, p] * x[ci, p + t - k/2]`.
pub(crate) fn kernel_grad(x: &[f64], cin: usize, dims: [usize; 3], grad_out: &[f64], cout: usize, k: usize) -> Vec<f64> {
    let xp = Padded::new(x, cin, dims, k / 2);
    let offs = xp.tap_offsets(k);
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { kernel_grad_avx2(&xp, cin, grad_out, cout, dims, &offs) };
    }
    kernel_grad_impl(&xp, cin, grad_out, cout, dims, &offs)
}
