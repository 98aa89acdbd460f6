//! Surface extraction, exact Euclidean distance transform and HD95.

use super::{MetricsError, Result};

/// Mask voxels with at least one face neighbour outside the mask. Voxels on
/// the grid border count as surface.
pub fn surface(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = dims;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !mask[i] {
                    continue;
                }
                let border = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                out[i] = border
                    || !mask[i - h * w]
                    || !mask[i + h * w]
                    || !mask[i - w]
                    || !mask[i + w]
                    || !mask[i - 1]
                    || !mask[i + 1];
            }
        }
    }
    out
}

/// Lower envelope of parabolas `(x - x_q)^2 + f(q)` at sample positions
/// `x_q = q * step`. Infinite entries are not sites.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], sites: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    sites.clear();
    bounds.clear();
    let pos = |q: usize| q as f64 * step;
    let cross = |a: usize, b: usize| -> f64 {
        ((f[b] + pos(b) * pos(b)) - (f[a] + pos(a) * pos(a))) / (2.0 * (pos(b) - pos(a)))
    };
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        while let Some(&last) = sites.last() {
            let s = cross(last, q);
            if sites.len() > 1 && s <= bounds[bounds.len() - 1] {
                sites.pop();
                bounds.pop();
            } else {
                bounds.push(s);
                break;
            }
        }
        sites.push(q);
    }
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    // bounds[k] separates sites[k] and sites[k + 1]
    debug_assert_eq!(bounds.len() + 1, sites.len());
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let x = pos(p);
        while k < bounds.len() && bounds[k] < x {
            k += 1;
        }
        let q = sites[k];
        let dx = x - pos(q);
        *o = dx * dx + f[q];
    }
}

/// Squared Euclidean distance (in mm^2) from every voxel to the nearest
/// `true` voxel of `features`; infinite when there are none.
pub fn squared_edt(features: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut g: Vec<f64> = features
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    let mut sites = Vec::new();
    let mut bounds = Vec::new();
    let n = dims.iter().copied().max().unwrap_or(0);
    let mut line = vec![0.0; n];
    let mut res = vec![0.0; n];
    // W axis
    for row in g.chunks_mut(w) {
        line[..w].copy_from_slice(row);
        edt_1d(&line[..w], spacing[2], &mut res[..w], &mut sites, &mut bounds);
        row.copy_from_slice(&res[..w]);
    }
    // H axis
    for z in 0..d {
        for x in 0..w {
            for y in 0..h {
                line[y] = g[(z * h + y) * w + x];
            }
            edt_1d(&line[..h], spacing[1], &mut res[..h], &mut sites, &mut bounds);
            for y in 0..h {
                g[(z * h + y) * w + x] = res[y];
            }
        }
    }
    // D axis
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                line[z] = g[(z * h + y) * w + x];
            }
            edt_1d(&line[..d], spacing[0], &mut res[..d], &mut sites, &mut bounds);
            for z in 0..d {
                g[(z * h + y) * w + x] = res[z];
            }
        }
    }
    g
}

/// Percentile `q` in `[0, 100]` with linear interpolation between order
/// statistics at fractional rank `q / 100 * (n - 1)`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = rank - lo as f64;
    values[lo] + frac * (values[hi] - values[lo])
}

/// Distance reported when exactly one of the two masks is empty: the
/// spacing-scaled diagonal of the grid.
pub fn empty_mask_sentinel(dims: [usize; 3], spacing: [f64; 3]) -> f64 {
    (0..3)
        .map(|a| (dims[a] as f64 * spacing[a]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// 95th percentile of the pooled directed surface distances in both
/// directions, in millimeters.
pub fn hd95(pred: &[bool], reference: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Result<f64> {
    let n: usize = dims.iter().product();
    if pred.len() != n || reference.len() != n {
        return Err(MetricsError::DimMismatch {
            expected: n,
            found: if pred.len() != n { pred.len() } else { reference.len() },
        });
    }
    let (pe, re) = (!pred.iter().any(|&b| b), !reference.iter().any(|&b| b));
    match (pe, re) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(empty_mask_sentinel(dims, spacing)),
        _ => {}
    }
    let sp = surface(pred, dims);
    let sr = surface(reference, dims);
    let to_ref = squared_edt(&sr, dims, spacing);
    let to_pred = squared_edt(&sp, dims, spacing);
    let mut dists: Vec<f64> = sp
        .iter()
        .zip(&to_ref)
        .filter(|(s, _)| **s)
        .map(|(_, d2)| d2.sqrt())
        .chain(sr.iter().zip(&to_pred).filter(|(s, _)| **s).map(|(_, d2)| d2.sqrt()))
        .collect();
    Ok(percentile(&mut dists, 95.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn edt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let dims = [rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6)];
            let spacing = [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)];
            let n: usize = dims.iter().product();
            let feats: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.15)).collect();
            let got = squared_edt(&feats, dims, spacing);
            let coord = |i: usize| [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
            for i in 0..n {
                let want = (0..n)
                    .filter(|&j| feats[j])
                    .map(|j| {
                        let (a, b) = (coord(i), coord(j));
                        (0..3)
                            .map(|k| ((a[k] as f64 - b[k] as f64) * spacing[k]).powi(2))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min);
                if want.is_infinite() {
                    assert!(got[i].is_infinite());
                } else {
                    assert!((got[i] - want).abs() < 1e-9, "{} vs {}", got[i], want);
                }
            }
        }
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![3.0, 1.0, 2.0, 4.0];
        assert!((percentile(&mut v, 50.0) - 2.5).abs() < 1e-15);
        assert_eq!(percentile(&mut v, 100.0), 4.0);
        assert_eq!(percentile(&mut [7.0], 95.0), 7.0);
    }

    #[test]
    fn point_pair_and_identity() {
        let dims = [1, 1, 8];
        let mut a = vec![false; 8];
        let mut b = vec![false; 8];
        a[1] = true;
        b[4] = true;
        assert_eq!(hd95(&a, &b, dims, [1.0; 3]).unwrap(), 3.0);
        assert_eq!(hd95(&a, &a, dims, [1.0; 3]).unwrap(), 0.0);
        assert_eq!(hd95(&a, &b, dims, [1.0, 1.0, 0.5]).unwrap(), 1.5);
    }

    #[test]
    fn empty_conventions() {
        let e = vec![false; 8];
        let mut a = vec![false; 8];
        a[3] = true;
        assert_eq!(hd95(&e, &e, [2, 2, 2], [1.0; 3]).unwrap(), 0.0);
        let s = hd95(&e, &a, [2, 2, 2], [1.0, 2.0, 2.0]).unwrap();
        assert!((s - 6.0).abs() < 1e-12);
        assert!(hd95(&e, &a[..7], [2, 2, 2], [1.0; 3]).is_err());
    }
}
