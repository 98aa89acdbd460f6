//! Central finite-difference gradient checks.
//!
//! Relative error of an analytic gradient `a` against a numeric gradient `n`
//! is `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, 1e-12)`, taken per
//! input tensor; a check reports the worst input over all instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-12, f64::max);
    diff / scale
}

/// Compares analytic gradients of `f` against central differences with step
/// `h`. `f` returns the value and one gradient per input.
pub fn check_fn<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    let (_, analytic) = f(inputs)?;
    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[k].len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = f(&work)?.0;
            work[k].data_mut()[i] = orig - h;
            let minus = f(&work)?.0;
            work[k].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        worst = worst.max(relative_error(analytic[k].data(), &numeric));
    }
    Ok(worst)
}

/// Gradient check for a scalar built on a fresh [`Graph`] from leaves holding
/// `inputs`.
pub fn check_graph<B>(inputs: &[Tensor], h: f64, build: B) -> Result<f64>
where
    B: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    check_fn(inputs, h, |ins| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ins.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
        let loss = build(&mut g, &ids)?;
        let value = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        let out = ids.iter().map(|&id| grads.take(id).expect("leaf gradient")).collect();
        Ok((value, out))
    })
}

/// One registered differentiable component: draws a random instance from the
/// rng and returns its relative error.
pub struct GradCheck {
    pub name: &'static str,
    pub run: Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>,
}

impl GradCheck {
    pub fn new(name: &'static str, run: impl Fn(&mut ChaCha8Rng) -> Result<f64> + 'static) -> Self {
        GradCheck { name, run: Box::new(run) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn run_checks(checks: &[GradCheck], instances: usize, seed: u64) -> Vec<CheckReport> {
    checks
        .iter()
        .enumerate()
        .map(|(idx, check)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(idx as u64 * 7919));
            let mut worst = 0.0f64;
            let mut failed = false;
            for _ in 0..instances {
                match (check.run)(&mut rng) {
                    Ok(e) if e.is_finite() => worst = worst.max(e),
                    _ => failed = true,
                }
            }
            if failed {
                worst = f64::INFINITY;
            }
            CheckReport {
                name: check.name.to_string(),
                instances,
                max_rel_err: worst,
                passed: !failed && worst < TOLERANCE,
            }
        })
        .collect()
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Random values bounded away from zero, for ops with a kink there.
fn random_off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    random_tensor(rng, shape).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// `sum(op(inputs) * weights)` with fixed random weights, so every output
/// element contributes a distinct coefficient.
fn weighted<F>(rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, op: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut probe = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| probe.leaf(t.clone())).collect();
    let out = op(&mut probe, &ids)?;
    let weights = random_tensor(rng, probe.value(out).shape());
    check_graph(&inputs, FD_STEP, |g, ids| {
        let y = op(g, ids)?;
        let w = g.leaf(weights.clone());
        let m = g.mul(y, w)?;
        Ok(g.sum(m))
    })
}

/// Every op of the tape vocabulary.
pub fn op_checks() -> Vec<GradCheck> {
    vec![
        GradCheck::new("conv3d", |rng| {
            let ins = vec![
                random_tensor(rng, &[2, 4, 4, 4]),
                random_tensor(rng, &[3, 2, 3, 3, 3]),
                random_tensor(rng, &[3]),
            ];
            weighted(rng, ins, |g, i| g.conv3d(i[0], i[1], i[2], 1, 1))
        }),
        GradCheck::new("conv3d_stride2", |rng| {
            let ins = vec![
                random_tensor(rng, &[2, 5, 5, 5]),
                random_tensor(rng, &[2, 2, 3, 3, 3]),
                random_tensor(rng, &[2]),
            ];
            weighted(rng, ins, |g, i| g.conv3d(i[0], i[1], i[2], 2, 1))
        }),
        GradCheck::new("relu", |rng| {
            let ins = vec![random_off_zero(rng, &[2, 3, 3, 3])];
            weighted(rng, ins, |g, i| Ok(g.relu(i[0])))
        }),
        GradCheck::new("add", |rng| {
            let ins = vec![random_tensor(rng, &[2, 2, 2, 2]), random_tensor(rng, &[2, 2, 2, 2])];
            weighted(rng, ins, |g, i| g.add(i[0], i[1]))
        }),
        GradCheck::new("mul", |rng| {
            let ins = vec![random_tensor(rng, &[2, 2, 2, 2]), random_tensor(rng, &[2, 2, 2, 2])];
            weighted(rng, ins, |g, i| g.mul(i[0], i[1]))
        }),
        GradCheck::new("channel_affine", |rng| {
            let ins = vec![
                random_tensor(rng, &[3, 2, 2, 2]),
                random_tensor(rng, &[3]),
                random_tensor(rng, &[3]),
            ];
            weighted(rng, ins, |g, i| g.channel_affine(i[0], i[1], i[2]))
        }),
        GradCheck::new("softmax_channels", |rng| {
            let ins = vec![random_tensor(rng, &[4, 2, 2, 2]).map(|v| 3.0 * v)];
            weighted(rng, ins, |g, i| g.softmax_channels(i[0]))
        }),
        GradCheck::new("maxpool2", |rng| {
            let ins = vec![random_tensor(rng, &[2, 4, 4, 4])];
            weighted(rng, ins, |g, i| g.maxpool2(i[0]))
        }),
        GradCheck::new("upsample2_nearest", |rng| {
            let ins = vec![random_tensor(rng, &[2, 2, 2, 2])];
            weighted(rng, ins, |g, i| g.upsample2(i[0]))
        }),
        GradCheck::new("global_avg_pool", |rng| {
            let ins = vec![random_tensor(rng, &[3, 2, 3, 2])];
            weighted(rng, ins, |g, i| g.global_avg_pool(i[0]))
        }),
        GradCheck::new("linear", |rng| {
            let ins = vec![random_tensor(rng, &[4]), random_tensor(rng, &[3, 4]), random_tensor(rng, &[3])];
            weighted(rng, ins, |g, i| g.linear(i[0], i[1], i[2]))
        }),
        GradCheck::new("concat_channels", |rng| {
            let ins = vec![random_tensor(rng, &[1, 2, 2, 2]), random_tensor(rng, &[2, 2, 2, 2])];
            weighted(rng, ins, |g, i| g.concat_channels(i))
        }),
        GradCheck::new("reduce_sum", |rng| {
            let ins = vec![random_tensor(rng, &[2, 3, 2, 2])];
            check_graph(&ins, FD_STEP, |g, i| {
                let sq = g.mul(i[0], i[0])?;
                Ok(g.sum(sq))
            })
        }),
        GradCheck::new("reduce_mean", |rng| {
            let ins = vec![random_tensor(rng, &[2, 3, 2, 2])];
            check_graph(&ins, FD_STEP, |g, i| {
                let sq = g.mul(i[0], i[0])?;
                Ok(g.mean(sq))
            })
        }),
        GradCheck::new("scale", |rng| {
            let ins = vec![random_tensor(rng, &[5])];
            let f = rng.gen_range(-2.0..2.0);
            weighted(rng, ins, move |g, i| Ok(g.scale(i[0], f)))
        }),
    ]
}
