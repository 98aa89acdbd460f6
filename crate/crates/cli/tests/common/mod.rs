//! Brute-force reference implementations used by the acceptance suite.

use std::collections::VecDeque;

use tta_core::metrics::{surface, Connectivity};
use tta_core::tensor::Tensor;

pub fn coord(i: usize, dims: [usize; 3]) -> [isize; 3] {
    [
        (i / (dims[1] * dims[2])) as isize,
        ((i / dims[2]) % dims[1]) as isize,
        (i % dims[2]) as isize,
    ]
}

fn inside(c: [isize; 3], dims: [usize; 3]) -> bool {
    (0..3).all(|a| (0..dims[a] as isize).contains(&c[a]))
}

fn index(c: [isize; 3], dims: [usize; 3]) -> usize {
    (c[0] as usize * dims[1] + c[1] as usize) * dims[2] + c[2] as usize
}

/// Mean over voxels of the mean, over the in-bounds 3x3x3 window, of
/// `max(0, P_bg(j) - max_fg P(i))`.
pub fn integrity(p: &Tensor, c: usize, n: usize) -> f64 {
    let dims = [n; 3];
    let v = n * n * n;
    let at = |k: usize, i: usize| p.data()[k * v + i];
    let mut total = 0.0;
    for i in 0..v {
        let fg = (1..c).map(|k| at(k, i)).fold(f64::NEG_INFINITY, f64::max);
        let here = coord(i, dims);
        let (mut sum, mut count) = (0.0, 0.0);
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let q = [here[0] + dz, here[1] + dy, here[2] + dx];
                    if inside(q, dims) {
                        count += 1.0;
                        sum += (at(0, index(q, dims)) - fg).max(0.0);
                    }
                }
            }
        }
        total += sum / count;
    }
    total / v as f64
}

/// Flood fill from each unvisited voxel in scan order.
pub fn bfs_labels(mask: &[bool], dims: [usize; 3], conn: Connectivity) -> Vec<u32> {
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0;
    let offsets = conn.offsets();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let c = coord(i, dims);
            for o in &offsets {
                let q = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
                if !inside(q, dims) {
                    continue;
                }
                let j = index(q, dims);
                if mask[j] && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    labels
}

/// Mean of `P_max * distance to the main region's centre` over foreground
/// voxels outside the main region, where the main region has the highest
/// mean `P_max` (ties to the region holding the lowest voxel index).
pub fn connectivity(p: &Tensor, c: usize, n: usize) -> f64 {
    let dims = [n; 3];
    let v = n * n * n;
    let mut arg = vec![0usize; v];
    let mut pmax = vec![0.0; v];
    for i in 0..v {
        for k in 0..c {
            let val = p.data()[k * v + i];
            if k == 0 || val > pmax[i] {
                pmax[i] = val;
                arg[i] = k;
            }
        }
    }
    let fg: Vec<bool> = arg.iter().map(|&a| a != 0).collect();
    let labels = bfs_labels(&fg, dims, Connectivity::TwentySix);
    let count = labels.iter().copied().max().unwrap_or(0) as usize;
    if count < 2 {
        return 0.0;
    }
    let mut regions = vec![Vec::new(); count];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            regions[l as usize - 1].push(i);
        }
    }
    let alpha: Vec<f64> = regions
        .iter()
        .map(|r| r.iter().map(|&i| pmax[i]).sum::<f64>() / r.len() as f64)
        .collect();
    let mut star = 0;
    for j in 1..count {
        if alpha[j] > alpha[star] {
            star = j;
        }
    }
    let mut centre = [0.0; 3];
    for &i in &regions[star] {
        let q = coord(i, dims);
        for a in 0..3 {
            centre[a] += q[a] as f64 / regions[star].len() as f64;
        }
    }
    let (mut sum, mut m) = (0.0, 0usize);
    for (j, r) in regions.iter().enumerate() {
        if j == star {
            continue;
        }
        for &i in r {
            let q = coord(i, dims);
            let d = (0..3).map(|a| (q[a] as f64 - centre[a]).powi(2)).sum::<f64>().sqrt();
            sum += pmax[i] * d;
            m += 1;
        }
    }
    sum / m as f64
}

/// 95th percentile, linearly interpolated, of the pooled directed surface
/// distances computed over all surface-voxel pairs.
pub fn hd95(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> f64 {
    let points = |m: &[bool]| -> Vec<usize> {
        surface(m, dims).iter().enumerate().filter(|(_, s)| **s).map(|(i, _)| i).collect()
    };
    let (sa, sb) = (points(a), points(b));
    let dist = |i: usize, j: usize| {
        let (p, q) = (coord(i, dims), coord(j, dims));
        (0..3).map(|k| ((p[k] - q[k]) as f64 * spacing[k]).powi(2)).sum::<f64>().sqrt()
    };
    let directed = |from: &[usize], to: &[usize]| -> Vec<f64> {
        from.iter()
            .map(|&i| to.iter().map(|&j| dist(i, j)).fold(f64::INFINITY, f64::min))
            .collect()
    };
    let mut d = directed(&sa, &sb);
    d.extend(directed(&sb, &sa));
    d.sort_by(f64::total_cmp);
    let rank = 0.95 * (d.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(d.len() - 1);
    d[lo] + (rank - lo as f64) * (d[hi] - d[lo])
}
