//! Composite augmentation policy with learnable combo weights.
//!
//! A policy holds eleven two-step combos. Each adaptation step samples `k` of
//! them without replacement, renders one view per combo and weights the
//! per-view losses by a softmax over the sampled combo weights `w`. Only `w`
//! is learned; magnitudes and probabilities are fixed configuration.

mod ops;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::Volume;

pub use ops::{apply_op, brain_mask, Op, MAX_MAGNITUDE};

pub const COMBO_COUNT: usize = 11;

const DEFAULT_POLICY: &str = include_str!("../../config/default_policy.json");

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy must have exactly {COMBO_COUNT} combos, found {0}")]
    ComboCount(usize),
    #[error("k must be in 1..={COMBO_COUNT}, got {0}")]
    SampleSize(usize),
    #[error("combo {index}: {msg}")]
    Combo { index: usize, msg: String },
    #[error("policy json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasicStrategy {
    pub op: Op,
    /// Magnitude in `[0, 10]`.
    pub m: f64,
    /// Probability of applying the op.
    pub rho: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComboStrategy {
    pub w: f64,
    pub s1: BasicStrategy,
    pub s2: BasicStrategy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub combos: Vec<ComboStrategy>,
    pub k: usize,
    /// Draw the reciprocal contrast factor with probability 1/2.
    #[serde(default)]
    pub symmetric_contrast: bool,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self::from_json(DEFAULT_POLICY).expect("bundled policy is valid")
    }
}

impl AugmentationPolicy {
    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let p: AugmentationPolicy = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.combos.len() != COMBO_COUNT {
            return Err(PolicyError::ComboCount(self.combos.len()));
        }
        if !(1..=COMBO_COUNT).contains(&self.k) {
            return Err(PolicyError::SampleSize(self.k));
        }
        for (index, c) in self.combos.iter().enumerate() {
            let bad = [c.w, c.s1.m, c.s1.rho, c.s2.m, c.s2.rho].iter().any(|v| !v.is_finite());
            if bad {
                return Err(PolicyError::Combo {
                    index,
                    msg: "non-finite parameter".into(),
                });
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.combos.iter().map(|c| c.w).collect()
    }

    pub fn set_weights(&mut self, w: &[f64]) {
        for (c, &v) in self.combos.iter_mut().zip(w) {
            c.w = v;
        }
    }

    /// Every op that appears in some combo.
    pub fn ops(&self) -> Vec<Op> {
        Op::ALL
            .into_iter()
            .filter(|op| self.combos.iter().any(|c| c.s1.op == *op || c.s2.op == *op))
            .collect()
    }
}

/// With probability `rho` applies the op; the Bernoulli draw is always made.
pub fn apply_basic<R: Rng + ?Sized>(s: &BasicStrategy, x: &Volume, symmetric_contrast: bool, rng: &mut R) -> Volume {
    let rho = s.rho.clamp(0.0, 1.0);
    let fire = rng.gen::<f64>() < rho;
    if !fire {
        return x.clone();
    }
    let invert_contrast = s.op == Op::Contrast && symmetric_contrast && rng.gen_bool(0.5);
    apply_op(s.op, s.m, x, invert_contrast, rng)
}

pub fn apply_combo<R: Rng + ?Sized>(c: &ComboStrategy, x: &Volume, symmetric_contrast: bool, rng: &mut R) -> Volume {
    let y = apply_basic(&c.s1, x, symmetric_contrast, rng);
    apply_basic(&c.s2, &y, symmetric_contrast, rng)
}

/// Softmax with max subtraction.
pub fn softmax(w: &[f64]) -> Vec<f64> {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `k` distinct combo indices in ascending order and their softmax
/// coefficients.
pub fn sample_and_weight<R: Rng + ?Sized>(policy: &AugmentationPolicy, rng: &mut R) -> (Vec<usize>, Vec<f64>) {
    let mut idx = index::sample(rng, policy.combos.len(), policy.k).into_vec();
    idx.sort_unstable();
    let w: Vec<f64> = idx.iter().map(|&i| policy.combos[i].w).collect();
    (idx, softmax(&w))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub views: Vec<Volume>,
    pub alphas: Vec<f64>,
    pub indices: Vec<usize>,
}

/// Samples combos and renders one view each. Every view uses its own
/// generator seeded from `rng`, so views do not depend on each other's draws.
pub fn generate_views<R: Rng + ?Sized>(policy: &AugmentationPolicy, x: &Volume, rng: &mut R) -> ViewBatch {
    let (indices, alphas) = sample_and_weight(policy, rng);
    let seeds: Vec<u64> = indices.iter().map(|_| rng.gen()).collect();
    let views = indices
        .iter()
        .zip(seeds)
        .map(|(&i, seed)| {
            let mut view_rng = ChaCha8Rng::seed_from_u64(seed);
            apply_combo(&policy.combos[i], x, policy.symmetric_contrast, &mut view_rng)
        })
        .collect();
    ViewBatch {
        views,
        alphas,
        indices,
    }
}

/// `dL/dw_i = alpha_i (l_i - sum_j alpha_j l_j)` for `L = sum_i alpha_i l_i`.
pub fn policy_weight_gradient(alphas: &[f64], losses: &[f64]) -> Vec<f64> {
    let mean: f64 = alphas.iter().zip(losses).map(|(a, l)| a * l).sum();
    alphas.iter().zip(losses).map(|(a, l)| a * (l - mean)).collect()
}

/// Scatters the sampled-combo gradient into a full-length vector.
pub fn scatter_gradient(indices: &[usize], grad: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (&i, &g) in indices.iter().zip(grad) {
        out[i] = g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume() -> Volume {
        let data: Vec<f64> = (0..2 * 64).map(|i| if i % 64 < 16 { 0.0 } else { (i % 13) as f64 * 0.2 - 1.0 }).collect();
        Volume::new(2, [4, 4, 4], [1.0; 3], data).unwrap()
    }

    fn strategy(op: Op, m: f64, rho: f64) -> BasicStrategy {
        BasicStrategy { op, m, rho }
    }

    #[test]
    fn default_policy_covers_every_op() {
        let p = AugmentationPolicy::default();
        assert_eq!(p.combos.len(), COMBO_COUNT);
        assert_eq!(p.k, 5);
        assert_eq!(p.ops(), Op::ALL.to_vec());
        assert!(p.weights().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn policy_validation() {
        let mut p = AugmentationPolicy::default();
        p.combos.pop();
        assert!(matches!(p.validate(), Err(PolicyError::ComboCount(10))));
        let mut p = AugmentationPolicy::default();
        p.k = 12;
        assert!(matches!(p.validate(), Err(PolicyError::SampleSize(12))));
        assert!(AugmentationPolicy::from_json(r#"{"combos":[],"k":5,"extra":1}"#).is_err());
    }

    #[test]
    fn combos_never_applied_or_self_cancelling() {
        let x = volume();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let never = ComboStrategy {
            w: 0.0,
            s1: strategy(Op::GaussianNoise, 9.0, 0.0),
            s2: strategy(Op::Invert, 0.0, 0.0),
        };
        assert_eq!(apply_combo(&never, &x, false, &mut rng), x);
        let inv = ComboStrategy {
            w: 0.0,
            s1: strategy(Op::Invert, 0.0, 1.0),
            s2: strategy(Op::Invert, 0.0, 1.0),
        };
        let y = apply_combo(&inv, &x, false, &mut rng);
        assert!(y.data.iter().zip(&x.data).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn softmax_examples() {
        let p = AugmentationPolicy::default();
        let (idx, a) = sample_and_weight(&p, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(idx.len(), 5);
        assert!(a.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let a = softmax(&[2f64.ln(), 0.0]);
        assert!((a[0] - 2.0 / 3.0).abs() < 1e-15 && (a[1] - 1.0 / 3.0).abs() < 1e-15);
        let a = softmax(&[1000.0, 999.0]);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn weight_gradient_examples() {
        assert_eq!(policy_weight_gradient(&[0.5, 0.5], &[1.0, 0.0]), vec![0.25, -0.25]);
        assert!(policy_weight_gradient(&[0.2; 5], &[0.7; 5]).iter().all(|&g| g.abs() < 1e-15));
        assert_eq!(scatter_gradient(&[1, 3], &[0.5, -0.5], 4), vec![0.0, 0.5, 0.0, -0.5]);
    }

    #[test]
    fn identity_policy_views_equal_input() {
        let mut p = AugmentationPolicy::default();
        for c in &mut p.combos {
            c.s1.rho = 0.0;
            c.s2.rho = 0.0;
        }
        let x = volume();
        let b = generate_views(&p, &x, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(b.views.len(), 5);
        assert!(b.views.iter().all(|v| *v == x));
    }

    #[test]
    fn views_deterministic_and_changed_when_forced() {
        let mut p = AugmentationPolicy::default();
        for c in &mut p.combos {
            c.s1.rho = 1.0;
            c.s1.m = c.s1.m.max(2.0);
        }
        let x = volume();
        let a = generate_views(&p, &x, &mut ChaCha8Rng::seed_from_u64(8));
        let b = generate_views(&p, &x, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(a, b);
        for v in &a.views {
            assert!(v.data.iter().zip(&x.data).any(|(p, q)| (p - q).abs() > 1e-9));
        }
    }
}
