//! Subcommand implementations. Each writes its artifacts and a run manifest
//! under the output directory and returns the in-memory results.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::Serialize;
use tta_core::adapt::{adapt_run, evaluate_dataset, source_pretrain, AdaptOutcome, Branch, PretrainReport};
use tta_core::losses::loss_checks;
use tta_core::metrics::{MetricTable, RegionMeans};
use tta_core::network::{load_checkpoint, network_checks, save_checkpoint, ModelState};
use tta_core::tensor::gradcheck::{op_checks, run_checks, CheckReport};
use tta_core::volume::Case;

use crate::config::RunConfig;
use crate::dataset::{load_split, split_files, to_case, write_dataset, DatasetManifest};
use crate::manifest::Recorder;
use crate::phantom::{generate, Split};

pub const SOURCE_CHECKPOINT: &str = "source_model.json";
pub const EMA_CHECKPOINT: &str = "model_ema.json";
pub const ADAPTIVE_CHECKPOINT: &str = "model_adaptive.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_SUMMARY: &str = "metrics_summary.json";
pub const ABLATION_CSV: &str = "ablation.csv";

fn prepare(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

/// Cases of `split`, read from `data.dir` or generated from the phantom spec
/// and the run seed.
pub fn load_cases(cfg: &RunConfig, seed: u64, split: Split, rec: &mut Recorder) -> Result<Vec<Case>> {
    match &cfg.data.dir {
        Some(dir) => {
            for f in split_files(dir, split)? {
                rec.input(f);
            }
            load_split(dir, split, cfg.data.grid)
        }
        None => generate(&cfg.data.phantom, seed)
            .iter()
            .filter(|c| c.split == split)
            .map(|c| to_case(c, cfg.data.grid))
            .collect(),
    }
}

fn source_checkpoint(cfg: &RunConfig, rec: &mut Recorder) -> Result<ModelState> {
    let path = cfg
        .data
        .checkpoint
        .as_ref()
        .ok_or_else(|| anyhow!("data.checkpoint is required; run `tta pretrain` first"))?;
    rec.input(path);
    rec.input(path.with_extension("bin"));
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn save_model(state: &ModelState, path: PathBuf, rec: &mut Recorder) -> Result<()> {
    save_checkpoint(state, &path).with_context(|| format!("writing {}", path.display()))?;
    rec.output(path.with_extension("bin"));
    rec.output(path);
    Ok(())
}

fn write_metrics(table: &MetricTable, out: &Path, rec: &mut Recorder) -> Result<()> {
    rec.write(out.join(METRICS_CSV), &table.to_csv())?;
    rec.write(out.join(METRICS_SUMMARY), &serde_json::to_string_pretty(&table.aggregate_json())?)
}

pub fn cmd_phantom(cfg: &RunConfig, seed: u64, out: &Path) -> Result<DatasetManifest> {
    prepare(out)?;
    let mut rec = Recorder::new("phantom", seed, cfg.hash());
    let manifest = write_dataset(out, &cfg.data.phantom, seed)?;
    for c in &manifest.cases {
        rec.output(out.join(&c.image));
        rec.output(out.join(&c.labels));
    }
    rec.output(out.join(crate::dataset::DATASET_MANIFEST));
    rec.finish(out)?;
    Ok(manifest)
}

pub fn cmd_pretrain(cfg: &RunConfig, seed: u64, out: &Path) -> Result<(ModelState, PretrainReport)> {
    prepare(out)?;
    let mut rec = Recorder::new("pretrain", seed, cfg.hash());
    let cases = load_cases(cfg, seed, Split::Source, &mut rec)?;
    let (state, report) = source_pretrain(&cases, &cfg.net, &cfg.pretrain, seed)?;
    save_model(&state, out.join(SOURCE_CHECKPOINT), &mut rec)?;
    rec.write(out.join("pretrain_report.json"), &serde_json::to_string_pretty(&report)?)?;
    let table = evaluate_dataset(&state, &cases, &cfg.eval.regions, false)?;
    rec.write(out.join("source_metrics.csv"), &table.to_csv())?;
    rec.finish(out)?;
    Ok((state, report))
}

/// Evaluates `data.checkpoint` on `split`. Modulation follows
/// `adapt.modulate`, so an adapted checkpoint is scored the way it was
/// trained; for a source checkpoint modulation is the identity either way.
pub fn cmd_eval(cfg: &RunConfig, seed: u64, out: &Path, split: Split) -> Result<MetricTable> {
    prepare(out)?;
    let mut rec = Recorder::new("eval", seed, cfg.hash());
    let state = source_checkpoint(cfg, &mut rec)?;
    let cases = load_cases(cfg, seed, split, &mut rec)?;
    let table = evaluate_dataset(&state, &cases, &cfg.eval.regions, cfg.adapt.modulate)?;
    write_metrics(&table, out, &mut rec)?;
    rec.finish(out)?;
    Ok(table)
}

pub struct AdaptArtifacts {
    pub outcome: AdaptOutcome,
    /// Final metrics of the configured evaluation branch.
    pub metrics: MetricTable,
}

fn run_adapt(cfg: &RunConfig, seed: u64, source: &ModelState, target: &[Case]) -> Result<AdaptArtifacts> {
    let outcome = adapt_run(
        source,
        target,
        target,
        cfg.policy.clone(),
        cfg.adapt.clone(),
        cfg.loss.clone(),
        &cfg.eval.regions,
        seed,
    )?;
    let model = outcome.eval_model(cfg.adapt.eval_branch);
    let metrics = evaluate_dataset(model, target, &cfg.eval.regions, cfg.adapt.modulate)?;
    Ok(AdaptArtifacts { outcome, metrics })
}

pub fn cmd_adapt(cfg: &RunConfig, seed: u64, out: &Path) -> Result<AdaptArtifacts> {
    prepare(out)?;
    let mut rec = Recorder::new("adapt", seed, cfg.hash());
    let source = source_checkpoint(cfg, &mut rec)?;
    let target = load_cases(cfg, seed, Split::Target, &mut rec)?;
    let art = run_adapt(cfg, seed, &source, &target)?;
    let report = &art.outcome.report;
    rec.write(out.join("report.jsonl"), &report.to_jsonl())?;
    rec.write(out.join("epochs.csv"), &report.epochs_csv())?;
    save_model(art.outcome.eval_model(Branch::Ema), out.join(EMA_CHECKPOINT), &mut rec)?;
    save_model(art.outcome.eval_model(Branch::Adaptive), out.join(ADAPTIVE_CHECKPOINT), &mut rec)?;
    rec.write(out.join("policy.json"), &serde_json::to_string_pretty(&art.outcome.policy)?)?;
    write_metrics(&art.metrics, out, &mut rec)?;
    rec.finish(out)?;
    Ok(art)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Losses,
    Network,
    All,
}

pub fn cmd_gradcheck(scope: Scope, instances: usize, seed: u64) -> Vec<CheckReport> {
    let mut checks = Vec::new();
    if matches!(scope, Scope::Ops | Scope::All) {
        checks.extend(op_checks());
    }
    if matches!(scope, Scope::Losses | Scope::All) {
        checks.extend(loss_checks());
    }
    if matches!(scope, Scope::Network | Scope::All) {
        checks.extend(network_checks());
    }
    run_checks(&checks, instances, seed)
}

/// The full model followed by the five single-removal variants.
pub const ABLATIONS: [&str; 6] = ["full", "no_csh", "no_ih", "no_cnh", "no_augmentation", "no_modulation"];

pub fn ablation_config(cfg: &RunConfig, method: &str) -> RunConfig {
    let mut c = cfg.clone();
    match method {
        "no_csh" => c.loss.lambda_csh = 0.0,
        "no_ih" => c.loss.lambda_ih = 0.0,
        "no_cnh" => c.loss.lambda_cnh = 0.0,
        "no_augmentation" => c.adapt.augment = false,
        "no_modulation" => c.adapt.modulate = false,
        _ => {}
    }
    c
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub method: String,
    pub regions: std::collections::BTreeMap<String, RegionMeans>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub regions: Vec<String>,
    pub baseline: std::collections::BTreeMap<String, RegionMeans>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn dice(&self, method: &str, region: &str) -> Option<f64> {
        let row = self.rows.iter().find(|r| r.method == method)?;
        row.regions.get(region).map(|m| m.dice)
    }

    /// One row per (region, metric), one column per method.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("region,metric");
        for r in &self.rows {
            s.push(',');
            s.push_str(&r.method);
        }
        s.push('\n');
        type Pick = fn(&RegionMeans) -> f64;
        let metrics: [(&str, Pick); 4] = [
            ("dice", |m| m.dice),
            ("hd95_mm", |m| m.hd95),
            ("iou", |m| m.iou),
            ("sensitivity", |m| m.sensitivity),
        ];
        for region in &self.regions {
            for (name, pick) in metrics {
                s.push_str(&format!("{region},{name}"));
                for r in &self.rows {
                    let v = r.regions.get(region).map(pick).unwrap_or(f64::NAN);
                    s.push_str(&format!(",{v}"));
                }
                s.push('\n');
            }
        }
        s
    }
}

pub fn cmd_ablate(cfg: &RunConfig, seed: u64, out: &Path) -> Result<AblationTable> {
    prepare(out)?;
    let mut rec = Recorder::new("ablate", seed, cfg.hash());
    let source = source_checkpoint(cfg, &mut rec)?;
    let target = load_cases(cfg, seed, Split::Target, &mut rec)?;
    let baseline = evaluate_dataset(&source, &target, &cfg.eval.regions, false)?.means();
    let mut rows = Vec::new();
    for method in ABLATIONS {
        let c = ablation_config(cfg, method);
        let art = run_adapt(&c, seed, &source, &target)?;
        let dir = out.join(method);
        prepare(&dir)?;
        rec.write(dir.join("epochs.csv"), &art.outcome.report.epochs_csv())?;
        rec.write(dir.join(METRICS_CSV), &art.metrics.to_csv())?;
        rows.push(AblationRow {
            method: method.to_string(),
            regions: art.metrics.means(),
        });
    }
    let table = AblationTable {
        regions: cfg.eval.regions.regions.iter().map(|r| r.name.clone()).collect(),
        baseline,
        rows,
    };
    rec.write(out.join(ABLATION_CSV), &table.to_csv())?;
    rec.write(out.join("ablation.json"), &serde_json::to_string_pretty(&table)?)?;
    rec.finish(out)?;
    Ok(table)
}
