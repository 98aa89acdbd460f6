//! Supervised source-domain training of the segmentation trunk and CsH head.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AdaptError, Result};
use crate::augment::brain_mask;
use crate::losses::{Objective, PseudoLabel};
use crate::network::{bind, forward, ForwardOptions, ModelState, NetConfig, ParamGroup};
use crate::seed::{derive_seed, stream};
use crate::tensor::{AdamW, AdamWConfig, Graph};
use crate::volume::{gaussian_blur, Case, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    /// Smoothing constant of the soft Dice term.
    pub eps: f64,
    pub smooth_prob: f64,
    /// Upper end of the smoothing sigma range, in voxels.
    pub smooth_sigma_max: f64,
    pub contrast_prob: f64,
    pub contrast_range: [f64; 2],
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 60,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            eps: 1e-5,
            smooth_prob: 0.5,
            smooth_sigma_max: 0.8,
            contrast_prob: 0.5,
            contrast_range: [0.9, 1.1],
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let probs = [self.smooth_prob, self.contrast_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err("augmentation probabilities must lie in [0, 1]".into());
        }
        if !(self.smooth_sigma_max >= 0.0) {
            return Err("smooth_sigma_max must be non-negative".into());
        }
        let [lo, hi] = self.contrast_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err("contrast_range must satisfy 0 < lo <= hi".into());
        }
        if !(self.optimizer.lr >= 0.0) || !(self.eps > 0.0) {
            return Err("lr must be non-negative and eps positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Random Gaussian smoothing followed by a random global contrast scale,
/// each applied independently with its configured probability. Background
/// voxels stay zero.
pub fn source_augment<R: Rng + ?Sized>(v: &Volume, cfg: &PretrainConfig, rng: &mut R) -> Volume {
    let mask = brain_mask(v);
    let n = v.voxels();
    let mut out = v.clone();
    if rng.gen::<f64>() < cfg.smooth_prob {
        let sigma = rng.gen::<f64>() * cfg.smooth_sigma_max;
        out = gaussian_blur(&out, [sigma; 3]);
        for c in 0..out.channels {
            for (x, &m) in out.data[c * n..(c + 1) * n].iter_mut().zip(&mask) {
                if !m {
                    *x = 0.0;
                }
            }
        }
    }
    if rng.gen::<f64>() < cfg.contrast_prob {
        let [lo, hi] = cfg.contrast_range;
        let scale = lo + (hi - lo) * rng.gen::<f64>();
        out.data.iter_mut().for_each(|x| *x *= scale);
    }
    out
}

/// Parameters updated during source training: the trunk and the CsH head.
/// The style path and the auxiliary heads are not part of the source forward
/// pass, so they keep their initial values.
pub fn pretrain_mask(state: &ModelState) -> Vec<bool> {
    state
        .params
        .iter()
        .map(|p| p.group == ParamGroup::Trunk || p.name.starts_with("head.csh."))
        .collect()
}

pub fn source_pretrain(cases: &[Case], net: &NetConfig, cfg: &PretrainConfig, seed: u64) -> Result<(ModelState, PretrainReport)> {
    if cases.is_empty() {
        return Err(AdaptError::EmptyDataset);
    }
    net.validate().map_err(AdaptError::Config)?;
    cfg.validate().map_err(AdaptError::Config)?;
    let mut targets = Vec::with_capacity(cases.len());
    for case in cases {
        let labels = case.labels.as_ref().ok_or_else(|| AdaptError::MissingLabels(case.id.clone()))?;
        targets.push(PseudoLabel::from_labels(&labels.labels, net.class_count, labels.dims)?);
    }
    let mut state = ModelState::init(net.clone(), derive_seed(seed, "pretrain/init"));
    let trainable = pretrain_mask(&state);
    let mut optimizer = AdamW::new(cfg.optimizer);
    let mut order_rng = stream(seed, "pretrain/order");
    let mut aug_rng = stream(seed, "pretrain/augment");
    let opts = ForwardOptions {
        modulate: false,
        all_heads: false,
    };
    let mut report = PretrainReport::default();
    let mut order: Vec<usize> = (0..cases.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for &i in &order {
            let x = source_augment(&cases[i].image, cfg, &mut aug_rng);
            let mut g = Graph::new();
            let bound = bind(&mut g, &state, &trainable);
            let xi = g.leaf(x.to_tensor());
            let out = forward(&mut g, net, &bound, xi, opts)?;
            let p = g.softmax_channels(out.csh)?;
            let objective = Objective::Supervised {
                target: &targets[i].one_hot,
                eps: cfg.eps,
            };
            let loss = g.objective(p, &objective)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(AdaptError::NonFinite(format!("source loss on case {}", cases[i].id)));
            }
            total += value;
            let mut grads = g.backward(loss)?;
            let grads: Vec<_> = bound
                .ids
                .iter()
                .zip(&trainable)
                .map(|(&id, &t)| if t { grads.take(id) } else { None })
                .collect();
            optimizer.step(
                state
                    .params
                    .iter_mut()
                    .zip(&grads)
                    .filter_map(|(p, g)| g.as_ref().map(|g| (p.name.as_str(), &mut p.value, g))),
            );
        }
        report.epoch_losses.push(total / cases.len() as f64);
    }
    Ok((state, report))
}
