//! Structural losses on per-voxel class probabilities `[C, D, H, W]`.
//!
//! Each loss returns its value together with the gradient with respect to the
//! probabilities; [`Objective`] plugs them into a [`Graph`] after a
//! channel softmax.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{connected_components_3d, Connectivity};
use crate::tensor::gradcheck::{check_fn, GradCheck, FD_STEP};
use crate::tensor::{softmax_channels, Graph, NodeId, Result, ScalarObjective, Tensor, TensorError};

/// One-hot map with exactly one `1` per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub one_hot: Tensor,
}

impl PseudoLabel {
    pub fn from_labels(labels: &[u16], class_count: usize, dims: [usize; 3]) -> Result<Self> {
        let v: usize = dims.iter().product();
        if labels.len() != v {
            return Err(TensorError::DataLength {
                shape: dims.to_vec(),
                len: labels.len(),
            });
        }
        let mut data = vec![0.0; class_count * v];
        for (i, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l >= class_count {
                return Err(TensorError::Invalid {
                    op: "pseudo_label",
                    msg: format!("label {l} outside {class_count} classes"),
                });
            }
            data[l * v + i] = 1.0;
        }
        let one_hot = Tensor::new(vec![class_count, dims[0], dims[1], dims[2]], data)?;
        Ok(PseudoLabel { one_hot })
    }

    /// Per-voxel argmax of `scores`, ties resolved toward the lower channel.
    pub fn from_scores(scores: &Tensor) -> Result<Self> {
        let [c, d, h, w] = scores.dims4("pseudo_label")?;
        Self::from_labels(&argmax_channels(scores), c, [d, h, w])
    }

    pub fn labels(&self) -> Vec<u16> {
        argmax_channels(&self.one_hot)
    }
}

/// Per-voxel index of the largest channel; the first maximum wins.
pub fn argmax_channels(t: &Tensor) -> Vec<u16> {
    let c = t.shape()[0];
    let v = t.len() / c;
    let x = t.data();
    (0..v)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if x[k * v + i] > x[best * v + i] {
                    best = k;
                }
            }
            best as u16
        })
        .collect()
}

/// Loss weights and structural-loss settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_csh: f64,
    pub lambda_ih: f64,
    pub lambda_cnh: f64,
    pub eps: f64,
    pub ih_radius: usize,
    pub connectivity: Connectivity,
    /// Compare the background probability at the centre voxel rather than at
    /// each neighbour.
    pub ih_centre_background: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_csh: 1.0,
            lambda_ih: 0.3,
            lambda_cnh: 0.001,
            eps: 1e-5,
            ih_radius: 1,
            connectivity: Connectivity::TwentySix,
            ih_centre_background: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (k, v) in [
            ("lambda_csh", self.lambda_csh),
            ("lambda_ih", self.lambda_ih),
            ("lambda_cnh", self.lambda_cnh),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{k} must be a finite nonnegative number, got {v}"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Invalid {
            op,
            msg: format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        });
    }
    Ok(())
}

/// `1 - 2 sum(P Y) / (sum(P^2) + sum(Y^2) + eps)` over every channel.
pub fn dice_consistency(p: &Tensor, y: &Tensor, eps: f64) -> Result<(f64, Tensor)> {
    check_same("dice_consistency", p, y)?;
    let (mut a, mut b) = (0.0, eps);
    for (&pv, &yv) in p.data().iter().zip(y.data()) {
        a += pv * yv;
        b += pv * pv + yv * yv;
    }
    let loss = 1.0 - 2.0 * a / b;
    let b2 = b * b;
    let grad = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&pv, &yv)| (4.0 * a * pv - 2.0 * yv * b) / b2)
        .collect();
    Ok((loss, Tensor::new(p.shape().to_vec(), grad)?))
}

/// Per-voxel maximum over channels `1..C` and the channel holding it.
fn foreground_max(p: &Tensor) -> (Vec<f64>, Vec<usize>) {
    let c = p.shape()[0];
    let v = p.len() / c;
    let x = p.data();
    let mut val = x[v..2 * v].to_vec();
    let mut arg = vec![1; v];
    for k in 2..c {
        for i in 0..v {
            if x[k * v + i] > val[i] {
                val[i] = x[k * v + i];
                arg[i] = k;
            }
        }
    }
    (val, arg)
}

/// Background-dominance penalty. For every voxel `p` and neighbour `q` in the
/// `(2r+1)^3` box clipped to the grid, penalizes `P_bg(q) - P_fg_max(p)` when
/// positive; the sum is divided by the voxel count and by each voxel's own
/// neighbour count. With `literal` the background term is read at `p`.
pub fn integrity_penalty(p: &Tensor, radius: usize, literal: bool) -> Result<(f64, Tensor)> {
    let [c, d, h, w] = p.dims4("integrity_penalty")?;
    if c < 2 {
        return Err(TensorError::Invalid {
            op: "integrity_penalty",
            msg: format!("needs a background and a foreground channel, got {c}"),
        });
    }
    let v = d * h * w;
    let (fg, fg_arg) = foreground_max(p);
    let bg = &p.data()[..v];
    let mut grad = vec![0.0; p.len()];
    let mut total = 0.0;
    let r = radius;
    let span = |i: usize, n: usize| i.saturating_sub(r)..(i + r + 1).min(n);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let (zs, ys, xs) = (span(z, d), span(y, h), span(x, w));
                let count = (zs.len() * ys.len() * xs.len()) as f64;
                let coef = 1.0 / (v as f64 * count);
                if literal {
                    let diff = bg[i] - fg[i];
                    if diff > 0.0 {
                        total += diff / v as f64;
                        grad[i] += 1.0 / v as f64;
                        grad[fg_arg[i] * v + i] -= 1.0 / v as f64;
                    }
                    continue;
                }
                let mut local = 0.0;
                let mut active = 0.0;
                for qz in zs {
                    for qy in ys.clone() {
                        let row = (qz * h + qy) * w;
                        for qx in xs.clone() {
                            let q = row + qx;
                            let diff = bg[q] - fg[i];
                            if diff > 0.0 {
                                local += diff;
                                active += 1.0;
                                grad[q] += coef;
                            }
                        }
                    }
                }
                total += local * coef;
                grad[fg_arg[i] * v + i] -= active * coef;
            }
        }
    }
    Ok((total, Tensor::new(p.shape().to_vec(), grad)?))
}

/// Foreground regions of the argmax map with their confidences.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet {
    /// Linear voxel indices per region, in scan order of first voxel.
    pub regions: Vec<Vec<usize>>,
    /// Mean of the per-voxel maximum probability over each region.
    pub confidence: Vec<f64>,
    /// Index of the most confident region (lowest index on ties).
    pub primary: usize,
    /// Mean `(z, y, x)` coordinate of the primary region, in voxels.
    pub centroid: [f64; 3],
}

/// Per-voxel maximum probability and its channel.
fn channel_max(p: &Tensor) -> (Vec<f64>, Vec<usize>) {
    let c = p.shape()[0];
    let v = p.len() / c;
    let x = p.data();
    let mut val = x[..v].to_vec();
    let mut arg = vec![0; v];
    for k in 1..c {
        for i in 0..v {
            if x[k * v + i] > val[i] {
                val[i] = x[k * v + i];
                arg[i] = k;
            }
        }
    }
    (val, arg)
}

pub fn foreground_regions(p: &Tensor, connectivity: Connectivity) -> Result<Option<RegionSet>> {
    let [_, d, h, w] = p.dims4("connectivity_penalty")?;
    let (pmax, arg) = channel_max(p);
    let mask: Vec<bool> = arg.iter().map(|&a| a != 0).collect();
    let cc = connected_components_3d(&mask, [d, h, w], connectivity);
    if cc.count() == 0 {
        return Ok(None);
    }
    let confidence: Vec<f64> = cc
        .regions
        .iter()
        .map(|r| r.iter().map(|&i| pmax[i]).sum::<f64>() / r.len() as f64)
        .collect();
    let mut primary = 0;
    for (j, &a) in confidence.iter().enumerate() {
        if a > confidence[primary] {
            primary = j;
        }
    }
    let mut centroid = [0.0; 3];
    for &i in &cc.regions[primary] {
        centroid[0] += (i / (h * w)) as f64;
        centroid[1] += ((i / w) % h) as f64;
        centroid[2] += (i % w) as f64;
    }
    let n = cc.regions[primary].len() as f64;
    centroid.iter_mut().for_each(|c| *c /= n);
    Ok(Some(RegionSet {
        regions: cc.regions,
        confidence,
        primary,
        centroid,
    }))
}

/// Mean over non-primary foreground voxels of `P_max(q)` times the distance
/// from `q` to the primary region's centroid. Region structure is treated as
/// constant, so gradients flow only through `P_max`.
pub fn connectivity_penalty(p: &Tensor, connectivity: Connectivity) -> Result<(f64, Tensor)> {
    let [_, _, h, w] = p.dims4("connectivity_penalty")?;
    let mut grad = vec![0.0; p.len()];
    let Some(set) = foreground_regions(p, connectivity)? else {
        return Ok((0.0, Tensor::new(p.shape().to_vec(), grad)?));
    };
    if set.regions.len() < 2 {
        return Ok((0.0, Tensor::new(p.shape().to_vec(), grad)?));
    }
    let (pmax, arg) = channel_max(p);
    let v = pmax.len();
    let n: usize = set
        .regions
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != set.primary)
        .map(|(_, r)| r.len())
        .sum();
    let c = set.centroid;
    let mut total = 0.0;
    for (j, region) in set.regions.iter().enumerate() {
        if j == set.primary {
            continue;
        }
        for &i in region {
            let dz = (i / (h * w)) as f64 - c[0];
            let dy = ((i / w) % h) as f64 - c[1];
            let dx = (i % w) as f64 - c[2];
            let dist = (dz * dz + dy * dy + dx * dx).sqrt() / n as f64;
            total += pmax[i] * dist;
            grad[arg[i] * v + i] += dist;
        }
    }
    Ok((total, Tensor::new(p.shape().to_vec(), grad)?))
}

/// Adapters from the loss functions to graph objectives.
pub enum Objective<'a> {
    Dice { target: &'a Tensor, eps: f64 },
    Integrity { radius: usize, literal: bool },
    Connectivity(Connectivity),
    Supervised { target: &'a Tensor, eps: f64 },
}

impl ScalarObjective for Objective<'_> {
    fn name(&self) -> &str {
        match self {
            Objective::Dice { .. } => "dice_consistency",
            Objective::Integrity { .. } => "integrity_penalty",
            Objective::Connectivity(_) => "connectivity_penalty",
            Objective::Supervised { .. } => "dice_cross_entropy",
        }
    }

    fn evaluate(&self, p: &Tensor) -> Result<(f64, Tensor)> {
        match self {
            Objective::Dice { target, eps } => dice_consistency(p, target, *eps),
            Objective::Integrity { radius, literal } => integrity_penalty(p, *radius, *literal),
            Objective::Connectivity(c) => connectivity_penalty(p, *c),
            Objective::Supervised { target, eps } => dice_cross_entropy(p, target, *eps),
        }
    }
}

/// Floor applied to probabilities inside the logarithm.
const LOG_FLOOR: f64 = 1e-12;

/// Source-training loss: class-averaged soft Dice plus mean voxel cross
/// entropy, equally weighted. Targets are one-hot.
pub fn dice_cross_entropy(p: &Tensor, y: &Tensor, eps: f64) -> Result<(f64, Tensor)> {
    check_same("dice_cross_entropy", p, y)?;
    let [c, ..] = p.dims4("dice_cross_entropy")?;
    let v = p.len() / c;
    let (pd, yd) = (p.data(), y.data());
    let mut grad = vec![0.0; p.len()];
    let mut dice = 0.0;
    for k in 0..c {
        let range = k * v..(k + 1) * v;
        let (mut a, mut b) = (0.0, eps);
        for i in range.clone() {
            a += pd[i] * yd[i];
            b += pd[i] * pd[i] + yd[i] * yd[i];
        }
        dice += 1.0 - 2.0 * a / b;
        for i in range {
            grad[i] += (4.0 * a * pd[i] - 2.0 * yd[i] * b) / (b * b) / c as f64;
        }
    }
    let mut ce = 0.0;
    for i in 0..p.len() {
        if yd[i] > 0.0 {
            let q = pd[i].max(LOG_FLOOR);
            ce -= yd[i] * q.ln();
            if pd[i] > LOG_FLOOR {
                grad[i] -= yd[i] / (q * v as f64);
            }
        }
    }
    Ok((dice / c as f64 + ce / v as f64, Tensor::new(p.shape().to_vec(), grad)?))
}

/// Values of the three head losses and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub csh: f64,
    pub ih: f64,
    pub cnh: f64,
    pub total: f64,
}

/// Node ids of the per-head softmax probabilities.
#[derive(Clone, Copy, Debug)]
pub struct HeadProbs {
    pub csh: NodeId,
    pub ih: NodeId,
    pub cnh: NodeId,
}

/// Adds `lambda_csh L_CsH + lambda_ih L_IH + lambda_cnh L_CnH` to the graph.
/// Terms with zero weight are evaluated for reporting but not attached.
pub fn multi_head_loss(g: &mut Graph, heads: HeadProbs, target: &PseudoLabel, cfg: &LossConfig) -> Result<(NodeId, LossComponents)> {
    let dice = Objective::Dice {
        target: &target.one_hot,
        eps: cfg.eps,
    };
    let ih = Objective::Integrity {
        radius: cfg.ih_radius,
        literal: cfg.ih_centre_background,
    };
    let cnh = Objective::Connectivity(cfg.connectivity);
    let terms: [(NodeId, &Objective, f64); 3] = [
        (heads.csh, &dice, cfg.lambda_csh),
        (heads.ih, &ih, cfg.lambda_ih),
        (heads.cnh, &cnh, cfg.lambda_cnh),
    ];
    let mut values = [0.0; 3];
    let mut total: Option<NodeId> = None;
    let mut sum = 0.0;
    for (k, (node, obj, lambda)) in terms.into_iter().enumerate() {
        if lambda == 0.0 {
            values[k] = obj.evaluate(g.value(node))?.0;
            continue;
        }
        let l = g.objective(node, obj)?;
        values[k] = g.value(l).item();
        sum += lambda * values[k];
        let scaled = g.scale(l, lambda);
        total = Some(match total {
            Some(t) => g.add(t, scaled)?,
            None => scaled,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.leaf(Tensor::scalar(0.0)),
    };
    Ok((
        total,
        LossComponents {
            csh: values[0],
            ih: values[1],
            cnh: values[2],
            total: sum,
        },
    ))
}

/// Softmax of random logits, shape `[c, n, n, n]`.
pub fn random_probs(rng: &mut impl Rng, c: usize, n: usize) -> Tensor {
    let v = n * n * n;
    let logits = (0..c * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
    softmax_channels(&Tensor::new(vec![c, n, n, n], logits).expect("shape")).expect("c >= 2")
}

/// Smallest gap between the largest and second largest of `values`.
fn top_gap(values: impl Iterator<Item = f64>) -> f64 {
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for x in values {
        if x > a {
            b = a;
            a = x;
        } else if x > b {
            b = x;
        }
    }
    a - b
}

/// Distance of `p` from the kinks of the integrity and connectivity losses:
/// argmax ties, foreground-max ties and zero crossings of the neighbourhood
/// differences.
fn kink_margin(p: &Tensor, radius: usize) -> f64 {
    let [c, d, h, w] = p.dims4("kink_margin").expect("rank 4");
    let v = d * h * w;
    let x = p.data();
    let mut margin = f64::INFINITY;
    for i in 0..v {
        margin = margin.min(top_gap((0..c).map(|k| x[k * v + i])));
        if c > 2 {
            margin = margin.min(top_gap((1..c).map(|k| x[k * v + i])));
        }
    }
    let (fg, _) = foreground_max(p);
    let r = radius as isize;
    for i in 0..v {
        let (z, y, xx) = ((i / (h * w)) as isize, ((i / w) % h) as isize, (i % w) as isize);
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (qz, qy, qx) = (z + dz, y + dy, xx + dx);
                    if qz < 0 || qy < 0 || qx < 0 || qz >= d as isize || qy >= h as isize || qx >= w as isize {
                        continue;
                    }
                    let q = ((qz as usize) * h + qy as usize) * w + qx as usize;
                    margin = margin.min((x[q] - fg[i]).abs());
                }
            }
        }
    }
    margin
}

/// Draws probability maps until one sits at least `1e-4` away from every kink.
fn smooth_instance(rng: &mut ChaCha8Rng, c: usize, n: usize) -> Tensor {
    loop {
        let p = random_probs(rng, c, n);
        if kink_margin(&p, 1) > 1e-4 {
            return p;
        }
    }
}

fn check_loss(p: Tensor, f: impl Fn(&Tensor) -> Result<(f64, Tensor)>) -> Result<f64> {
    check_fn(&[p], FD_STEP, |ins| {
        let (l, g) = f(&ins[0])?;
        Ok((l, vec![g]))
    })
}

/// Finite-difference checks of every loss on random `6^3` maps.
pub fn loss_checks() -> Vec<GradCheck> {
    vec![
        GradCheck::new("dice_consistency", |rng| {
            let p = random_probs(rng, 4, 6);
            let y = PseudoLabel::from_scores(&random_probs(rng, 4, 6))?;
            check_loss(p, |p| dice_consistency(p, &y.one_hot, 1e-5))
        }),
        GradCheck::new("integrity_penalty", |rng| {
            let p = smooth_instance(rng, 4, 6);
            check_loss(p, |p| integrity_penalty(p, 1, false))
        }),
        GradCheck::new("integrity_penalty_literal", |rng| {
            let p = smooth_instance(rng, 4, 6);
            check_loss(p, |p| integrity_penalty(p, 1, true))
        }),
        GradCheck::new("connectivity_penalty", |rng| {
            let p = smooth_instance(rng, 4, 6);
            check_loss(p, |p| connectivity_penalty(p, Connectivity::TwentySix))
        }),
        GradCheck::new("dice_cross_entropy", |rng| {
            let p = random_probs(rng, 4, 6);
            let y = PseudoLabel::from_scores(&random_probs(rng, 4, 6))?;
            check_loss(p, |p| dice_cross_entropy(p, &y.one_hot, 1e-5))
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::run_checks;

    fn probs(c: usize, dims: [usize; 3], f: impl Fn(usize, usize) -> f64) -> Tensor {
        let v: usize = dims.iter().product();
        let data = (0..c * v).map(|i| f(i / v, i % v)).collect();
        Tensor::new(vec![c, dims[0], dims[1], dims[2]], data).unwrap()
    }

    #[test]
    fn dice_perfect_and_uniform() {
        let labels: Vec<u16> = (0..1000).map(|i| (i % 3) as u16).collect();
        let y = PseudoLabel::from_labels(&labels, 3, [10, 10, 10]).unwrap();
        let (l, _) = dice_consistency(&y.one_hot, &y.one_hot, 1e-5).unwrap();
        assert!(l < 1e-4 && l > 0.0);
        let n = 64.0;
        let y = PseudoLabel::from_labels(&[1; 64], 2, [4, 4, 4]).unwrap();
        let p = probs(2, [4, 4, 4], |_, _| 0.5);
        let (l, _) = dice_consistency(&p, &y.one_hot, 1e-5).unwrap();
        let want = 1.0 - 2.0 * (n / 2.0) / (n / 2.0 + n + 1e-5);
        assert!((l - want).abs() < 1e-12);
        assert!(dice_consistency(&p, &probs(3, [4, 4, 4], |_, _| 0.0), 1e-5).is_err());
    }

    #[test]
    fn integrity_examples() {
        let p = probs(2, [1, 1, 1], |k, _| if k == 0 { 0.8 } else { 0.3 });
        for literal in [false, true] {
            let (l, _) = integrity_penalty(&p, 1, literal).unwrap();
            assert!((l - 0.5).abs() < 1e-15);
        }
        let p = probs(2, [3, 3, 3], |_, _| 0.5);
        assert_eq!(integrity_penalty(&p, 1, false).unwrap().0, 0.0);
        let p = probs(1, [2, 2, 2], |_, _| 1.0);
        assert!(integrity_penalty(&p, 1, false).is_err());
    }

    #[test]
    fn connectivity_hand_example() {
        let dims = [1, 1, 5];
        let p = probs(2, dims, |k, i| match (k, i) {
            (1, 0) => 0.9,
            (0, 0) => 0.1,
            (1, 4) => 0.5,
            (0, 4) => 0.5,
            (0, _) => 1.0,
            _ => 0.0,
        });
        // the tie at voxel 4 resolves to background, so tilt it slightly
        let mut p = p;
        p.data_mut()[5 + 4] = 0.5 + 1e-9;
        p.data_mut()[4] = 0.5 - 1e-9;
        let (l, _) = connectivity_penalty(&p, Connectivity::TwentySix).unwrap();
        assert!((l - 2.0).abs() < 1e-8);
        let single = probs(2, dims, |k, _| if k == 1 { 0.7 } else { 0.3 });
        assert_eq!(connectivity_penalty(&single, Connectivity::TwentySix).unwrap().0, 0.0);
    }

    #[test]
    fn argmax_ties_prefer_lower_channel() {
        let p = probs(3, [1, 1, 2], |k, i| if i == 0 { [0.4, 0.4, 0.2][k] } else { [0.1, 0.3, 0.6][k] });
        assert_eq!(argmax_channels(&p), vec![0, 2]);
        let y = PseudoLabel::from_scores(&p).unwrap();
        assert_eq!(y.labels(), vec![0, 2]);
    }

    #[test]
    fn supervised_loss_gradient() {
        let labels = [0u16, 1, 2, 1, 0, 2, 2, 1];
        let y = PseudoLabel::from_labels(&labels, 3, [2, 2, 2]).unwrap();
        let p = probs(3, [2, 2, 2], |k, i| 0.2 + 0.1 * ((k * 7 + i * 3) % 5) as f64);
        let err = check_fn(&[p], FD_STEP, |ins| {
            let (l, g) = dice_cross_entropy(&ins[0], &y.one_hot, 1e-5)?;
            Ok((l, vec![g]))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for r in run_checks(&loss_checks(), 3, 17) {
            assert!(r.passed, "{} {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn zero_weights_reduce_to_consistency() {
        let labels: Vec<u16> = (0..27).map(|i| (i % 2) as u16).collect();
        let y = PseudoLabel::from_labels(&labels, 2, [3, 3, 3]).unwrap();
        let p = probs(2, [3, 3, 3], |k, i| if k == 0 { 0.3 + 0.01 * i as f64 } else { 0.7 - 0.01 * i as f64 });
        let mut g = Graph::new();
        let id = g.leaf(p.clone());
        let cfg = LossConfig {
            lambda_ih: 0.0,
            lambda_cnh: 0.0,
            lambda_csh: 2.0,
            ..LossConfig::default()
        };
        let heads = HeadProbs { csh: id, ih: id, cnh: id };
        let (node, comps) = multi_head_loss(&mut g, heads, &y, &cfg).unwrap();
        let dice = dice_consistency(&p, &y.one_hot, cfg.eps).unwrap().0;
        assert_eq!(g.value(node).item(), 2.0 * dice);
        assert_eq!(comps.total, 2.0 * dice);
        assert!(comps.ih > 0.0);
    }

    #[test]
    fn config_round_trip_and_keys() {
        let json = serde_json::to_value(LossConfig::default()).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"lambda_csh":1.0,"lambda_ih":0.3,"lambda_cnh":0.001,"eps":1e-5,"ih_radius":1,"connectivity":26,"ih_centre_background":false})
        );
        let bad: std::result::Result<LossConfig, _> = serde_json::from_str(r#"{"connectivity":8}"#);
        assert!(bad.is_err());
        let neg = LossConfig {
            lambda_ih: -1.0,
            ..LossConfig::default()
        };
        assert!(neg.validate().is_err());
    }
}
