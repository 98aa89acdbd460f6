//! Source pretraining and the dual-branch target adaptation loop.
//!
//! The adaptive branch `theta_A` is trained on augmented views of each target
//! volume against pseudo-labels from the EMA branch `theta_E`, which in turn
//! tracks `theta_A` by `theta_E <- p theta_E + (1 - p) theta_A` after every
//! step. Only the style encoder, modulation maps and heads of `theta_A` are
//! optimized; the trunk keeps its source values.

mod pretrain;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{generate_views, policy_weight_gradient, scatter_gradient, AugmentationPolicy, PolicyError, ViewBatch};
use crate::losses::{argmax_channels, multi_head_loss, HeadProbs, LossConfig, PseudoLabel};
use crate::metrics::{evaluate_case, MetricTable, MetricsError, RegionMeans, RegionSpec};
use crate::network::{bind, forward, predict_probs, ForwardOptions, ModelState, ParamGroup, Phase};
use crate::seed::stream;
use crate::tensor::{AdamW, AdamWConfig, Graph, Tensor, TensorError};
use crate::volume::{Case, LabelMap, Volume, VolumeError};

pub use pretrain::{pretrain_mask, source_augment, source_pretrain, PretrainConfig, PretrainReport};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("case {0} has no reference labels")]
    MissingLabels(String),
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub type Result<T> = std::result::Result<T, AdaptError>;

/// Which branch is used for evaluation after adaptation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    #[default]
    Ema,
    Adaptive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// EMA momentum `p`.
    pub momentum: f64,
    pub optimizer: AdamWConfig,
    /// Train on augmented views. When off, each step uses the raw input as
    /// its only view.
    pub augment: bool,
    /// Apply style modulation. When off, modulation stays at the identity
    /// and neither the modulation maps nor the style encoder are trained.
    pub modulate: bool,
    pub eval_branch: Branch,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 10,
            batch_size: 1,
            momentum: 0.95,
            optimizer: AdamWConfig::default(),
            augment: true,
            modulate: true,
            eval_branch: Branch::Ema,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.batch_size != 1 {
            return Err(format!("batch_size must be 1, got {}", self.batch_size));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(format!("momentum must lie in [0, 1], got {}", self.momentum));
        }
        if !(self.optimizer.lr >= 0.0) || !self.optimizer.lr.is_finite() {
            return Err(format!("lr must be finite and non-negative, got {}", self.optimizer.lr));
        }
        Ok(())
    }
}

/// The two branches of the adaptation stage.
#[derive(Clone, Debug, PartialEq)]
pub struct DualBranchState {
    pub ema: ModelState,
    pub adaptive: ModelState,
    pub momentum: f64,
    pub step: u64,
}

impl DualBranchState {
    /// Both branches start from `source` with the IH and CnH heads copied from
    /// the CsH head.
    pub fn new(source: &ModelState, momentum: f64) -> Self {
        let mut init = source.clone();
        init.copy_primary_head();
        DualBranchState {
            ema: init.clone(),
            adaptive: init,
            momentum,
            step: 0,
        }
    }

    /// `theta_E <- p theta_E + (1 - p) theta_A` over every parameter. Entries
    /// that already agree are left untouched, so frozen parameters stay
    /// bit-identical.
    pub fn ema_update(&mut self) {
        let p = self.momentum;
        for (e, a) in self.ema.params.iter_mut().zip(&self.adaptive.params) {
            for (x, &y) in e.value.data_mut().iter_mut().zip(a.value.data()) {
                if *x != y {
                    *x = p * *x + (1.0 - p) * y;
                }
            }
        }
    }

    pub fn branch(&self, b: Branch) -> &ModelState {
        match b {
            Branch::Ema => &self.ema,
            Branch::Adaptive => &self.adaptive,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Ok,
    Aborted,
}

/// Diagnostics of one adaptation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub case_id: String,
    pub status: StepStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    /// Indices of the sampled combos.
    pub sampled: Vec<usize>,
    pub alphas: Vec<f64>,
    /// Multi-head loss of each view.
    pub view_losses: Vec<f64>,
    /// Alpha-weighted head losses.
    pub l_csh: f64,
    pub l_ih: f64,
    pub l_cnh: f64,
    /// Unweighted mean of the per-view multi-head losses.
    pub l_mh: f64,
    /// `sum_i alpha_i l_i`.
    pub l_aug: f64,
    pub delta_adaptive: f64,
    pub delta_ema: f64,
    pub policy_weights: Vec<f64>,
}

/// Metric snapshot after an epoch; epoch 0 is taken before any step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub branch: Branch,
    pub mean_loss: f64,
    pub aborted: usize,
    pub regions: BTreeMap<String, RegionMeans>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl AdaptReport {
    /// One JSON object per step.
    pub fn to_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    /// `epoch,branch,mean_loss,aborted,region,dice,hd95_mm,iou,sensitivity`.
    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,branch,mean_loss,aborted,region,dice,hd95_mm,iou,sensitivity\n");
        for e in &self.epochs {
            let branch = match e.branch {
                Branch::Ema => "ema",
                Branch::Adaptive => "adaptive",
            };
            for (region, m) in &e.regions {
                out.push_str(&format!(
                    "{},{branch},{},{},{region},{},{},{},{}\n",
                    e.epoch, e.mean_loss, e.aborted, m.dice, m.hd95, m.iou, m.sensitivity
                ));
            }
        }
        out
    }
}

/// Name under which the policy weights are registered with the optimizer.
pub const POLICY_PARAM: &str = "policy.w";

/// Hard segmentation from the CsH head.
pub fn predict_labels(state: &ModelState, image: &Volume, modulate: bool) -> Result<LabelMap> {
    let probs = predict_probs(state, &image.to_tensor(), modulate)?;
    let labels = argmax_channels(&probs);
    Ok(LabelMap::new(image.dims, image.spacing, labels, state.config.class_count as u16)?)
}

/// Per-case metric rows for every labeled case, ordered by case id.
pub fn evaluate_dataset(state: &ModelState, cases: &[Case], spec: &RegionSpec, modulate: bool) -> Result<MetricTable> {
    let mut rows = Vec::new();
    for case in cases {
        let reference = case.labels.as_ref().ok_or_else(|| AdaptError::MissingLabels(case.id.clone()))?;
        let pred = predict_labels(state, &case.image, modulate)?;
        rows.extend(evaluate_case(&case.id, &pred, reference, spec)?);
    }
    Ok(MetricTable::new(rows))
}

/// Drives adaptation steps on one dual-branch state.
pub struct Adapter {
    pub state: DualBranchState,
    pub policy: AugmentationPolicy,
    pub config: AdaptConfig,
    pub loss: LossConfig,
    optimizer: AdamW,
    trainable: Vec<bool>,
    rng: ChaCha8Rng,
}

struct Snapshot {
    state: DualBranchState,
    policy: AugmentationPolicy,
    optimizer: AdamW,
}

impl Adapter {
    pub fn new(source: &ModelState, policy: AugmentationPolicy, config: AdaptConfig, loss: LossConfig, seed: u64) -> Result<Self> {
        let state = DualBranchState::new(source, config.momentum);
        Self::from_state(state, policy, config, loss, seed)
    }

    /// Continues from an existing state; its momentum is replaced by
    /// `config.momentum`.
    pub fn from_state(
        mut state: DualBranchState,
        policy: AugmentationPolicy,
        config: AdaptConfig,
        loss: LossConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate().map_err(AdaptError::Config)?;
        loss.validate().map_err(AdaptError::Config)?;
        policy.validate()?;
        state.momentum = config.momentum;
        let trainable = state
            .adaptive
            .trainable_mask(Phase::TargetAdapt)
            .into_iter()
            .zip(&state.adaptive.params)
            .map(|(t, p)| t && (config.modulate || !matches!(p.group, ParamGroup::Modulation | ParamGroup::StyleEncoder)))
            .collect();
        Ok(Adapter {
            state,
            policy,
            optimizer: AdamW::new(config.optimizer),
            config,
            loss,
            trainable,
            rng: stream(seed, "adapt/views"),
        })
    }

    /// Parameters that receive gradient updates, by index.
    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    /// One-hot argmax of the EMA branch's CsH probabilities on `x`.
    pub fn pseudo_label(&self, x: &Volume) -> Result<PseudoLabel> {
        let probs = predict_probs(&self.state.ema, &x.to_tensor(), self.config.modulate)?;
        Ok(PseudoLabel::from_scores(&probs)?)
    }

    fn views(&mut self, x: &Volume) -> ViewBatch {
        if self.config.augment {
            generate_views(&self.policy, x, &mut self.rng)
        } else {
            ViewBatch {
                views: vec![x.clone()],
                alphas: vec![1.0],
                indices: Vec::new(),
            }
        }
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            state: self.state.clone(),
            policy: self.policy.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    fn restore(&mut self, s: Snapshot) {
        self.state = s.state;
        self.policy = s.policy;
        self.optimizer = s.optimizer;
    }

    /// One adaptation step on `image`. A non-finite loss, gradient or updated
    /// parameter aborts the step: every parameter, the policy weights and the
    /// optimizer moments are rolled back and an `Aborted` record is returned.
    pub fn step(&mut self, case_id: &str, image: &Volume, epoch: usize) -> Result<StepRecord> {
        let before = self.snapshot();
        let target = self.pseudo_label(image)?;
        let batch = self.views(image);
        let mut record = StepRecord {
            step: self.state.step,
            epoch,
            case_id: case_id.to_string(),
            status: StepStatus::Ok,
            message: None,
            sampled: batch.indices.clone(),
            alphas: batch.alphas.clone(),
            view_losses: Vec::with_capacity(batch.views.len()),
            l_csh: 0.0,
            l_ih: 0.0,
            l_cnh: 0.0,
            l_mh: 0.0,
            l_aug: 0.0,
            delta_adaptive: 0.0,
            delta_ema: 0.0,
            policy_weights: self.policy.weights(),
        };

        let mut grads: Vec<Option<Tensor>> = self
            .state
            .adaptive
            .params
            .iter()
            .zip(&self.trainable)
            .map(|(p, &t)| t.then(|| Tensor::zeros(p.value.shape())))
            .collect();
        let opts = ForwardOptions {
            modulate: self.config.modulate,
            all_heads: true,
        };
        let mut failure = None;
        for (view, &alpha) in batch.views.iter().zip(&batch.alphas) {
            let mut g = Graph::new();
            let bound = bind(&mut g, &self.state.adaptive, &self.trainable);
            let xi = g.leaf(view.to_tensor());
            let out = forward(&mut g, &self.state.adaptive.config, &bound, xi, opts)?;
            let heads = HeadProbs {
                csh: g.softmax_channels(out.csh)?,
                ih: g.softmax_channels(out.ih.expect("all heads requested"))?,
                cnh: g.softmax_channels(out.cnh.expect("all heads requested"))?,
            };
            let (loss, parts) = multi_head_loss(&mut g, heads, &target, &self.loss)?;
            record.view_losses.push(parts.total);
            record.l_csh += alpha * parts.csh;
            record.l_ih += alpha * parts.ih;
            record.l_cnh += alpha * parts.cnh;
            record.l_aug += alpha * parts.total;
            if !parts.total.is_finite() {
                failure = Some(format!("non-finite loss on view {}", record.view_losses.len() - 1));
                break;
            }
            let mut vg = g.backward(loss)?;
            for (acc, &id) in grads.iter_mut().zip(&bound.ids) {
                if let Some(acc) = acc {
                    acc.add_scaled(&vg.take(id).expect("trainable leaf has a gradient"), alpha);
                }
            }
        }
        record.l_mh = record.view_losses.iter().sum::<f64>() / record.view_losses.len().max(1) as f64;
        if failure.is_none() && grads.iter().flatten().any(|g| !g.all_finite()) {
            failure = Some("non-finite gradient".into());
        }

        if failure.is_none() {
            let mut w = Tensor::from_vec(self.policy.weights());
            let wg = Tensor::from_vec(scatter_gradient(
                &batch.indices,
                &policy_weight_gradient(&batch.alphas, &record.view_losses),
                w.len(),
            ));
            let params = self
                .state
                .adaptive
                .params
                .iter_mut()
                .zip(&grads)
                .filter_map(|(p, g)| g.as_ref().map(|g| (p.name.as_str(), &mut p.value, g)));
            if self.config.augment {
                self.optimizer.step(params.chain(std::iter::once((POLICY_PARAM, &mut w, &wg))));
                self.policy.set_weights(w.data());
            } else {
                self.optimizer.step(params);
            }
            self.state.ema_update();
            if !self.state.adaptive.all_finite() || !self.state.ema.all_finite() || self.policy.weights().iter().any(|v| !v.is_finite()) {
                failure = Some("non-finite parameter after update".into());
            }
        }

        if let Some(msg) = failure {
            let step = self.state.step;
            self.restore(before);
            self.state.step = step + 1;
            record.status = StepStatus::Aborted;
            record.message = Some(msg);
            record.policy_weights = self.policy.weights();
            return Ok(record);
        }
        record.delta_adaptive = param_distance(&before.state.adaptive, &self.state.adaptive);
        record.delta_ema = param_distance(&before.state.ema, &self.state.ema);
        record.policy_weights = self.policy.weights();
        self.state.step += 1;
        Ok(record)
    }
}

/// Euclidean distance between two parameter sets with the same layout.
pub fn param_distance(a: &ModelState, b: &ModelState) -> f64 {
    a.params
        .iter()
        .zip(&b.params)
        .flat_map(|(p, q)| p.value.data().iter().zip(q.value.data()))
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub struct AdaptOutcome {
    pub state: DualBranchState,
    pub policy: AugmentationPolicy,
    pub report: AdaptReport,
}

impl AdaptOutcome {
    pub fn eval_model(&self, branch: Branch) -> &ModelState {
        self.state.branch(branch)
    }
}

/// `config.epochs` passes over `cases` in a seeded shuffle order, one step per
/// case. After every epoch, and once before the first, the configured branch
/// is evaluated on `eval_cases`.
#[allow(clippy::too_many_arguments)]
pub fn adapt_run(
    source: &ModelState,
    cases: &[Case],
    eval_cases: &[Case],
    policy: AugmentationPolicy,
    config: AdaptConfig,
    loss: LossConfig,
    spec: &RegionSpec,
    seed: u64,
) -> Result<AdaptOutcome> {
    if cases.is_empty() {
        return Err(AdaptError::EmptyDataset);
    }
    let mut adapter = Adapter::new(source, policy, config, loss, seed)?;
    let mut order_rng = stream(seed, "adapt/order");
    let mut report = AdaptReport::default();
    let branch = adapter.config.eval_branch;
    let modulate = adapter.config.modulate;
    let snapshot = |adapter: &Adapter, epoch: usize, losses: &[f64], aborted: usize| -> Result<EpochSummary> {
        let table = evaluate_dataset(adapter.state.branch(branch), eval_cases, spec, modulate)?;
        Ok(EpochSummary {
            epoch,
            branch,
            mean_loss: if losses.is_empty() { 0.0 } else { losses.iter().sum::<f64>() / losses.len() as f64 },
            aborted,
            regions: table.means(),
        })
    };
    report.epochs.push(snapshot(&adapter, 0, &[], 0)?);
    let mut order: Vec<usize> = (0..cases.len()).collect();
    for epoch in 1..=adapter.config.epochs {
        order.shuffle(&mut order_rng);
        let mut losses = Vec::with_capacity(cases.len());
        let mut aborted = 0;
        for &i in &order {
            let rec = adapter.step(&cases[i].id, &cases[i].image, epoch)?;
            match rec.status {
                StepStatus::Ok => losses.push(rec.l_aug),
                StepStatus::Aborted => aborted += 1,
            }
            report.steps.push(rec);
        }
        report.epochs.push(snapshot(&adapter, epoch, &losses, aborted)?);
    }
    Ok(AdaptOutcome {
        state: adapter.state,
        policy: adapter.policy,
        report,
    })
}
