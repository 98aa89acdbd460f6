use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tta_cli::commands::{cmd_ablate, cmd_adapt, cmd_eval, cmd_gradcheck, cmd_phantom, cmd_pretrain, Scope};
use tta_cli::config::{ConfigError, RunConfig};
use tta_cli::phantom::Split;

/// Test-time adaptation of a 3D segmentation network on synthetic phantoms.
#[derive(Parser)]
#[command(name = "tta", version)]
struct Cli {
    /// Run configuration (JSON). Omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a source/target phantom dataset.
    Phantom,
    /// Train the source model on the source split.
    Pretrain,
    /// Adapt `data.checkpoint` to the target split.
    Adapt,
    /// Score `data.checkpoint` on one split.
    Eval {
        #[arg(long, value_enum, default_value_t = SplitArg::Target)]
        split: SplitArg,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ScopeArg::All)]
        scope: ScopeArg,
        /// Random instances per component.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Full model and the five single-removal variants.
    Ablate,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Source,
    Target,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Ops,
    Losses,
    Network,
    All,
}

fn fail(code: u8, body: serde_json::Value) -> ExitCode {
    eprintln!("{body}");
    ExitCode::from(code)
}

fn print_means(label: &str, means: &std::collections::BTreeMap<String, tta_core::metrics::RegionMeans>) {
    for (region, m) in means {
        println!(
            "{label} {region}: dice {:.4} hd95 {:.3} iou {:.4} sensitivity {:.4}",
            m.dice, m.hd95, m.iou, m.sensitivity
        );
    }
}

fn run(cli: Cli, cfg: RunConfig) -> anyhow::Result<bool> {
    let (seed, out) = (cli.seed, cli.out.as_path());
    match cli.command {
        Command::Phantom => {
            let m = cmd_phantom(&cfg, seed, out)?;
            println!("wrote {} cases to {}", m.cases.len(), out.display());
        }
        Command::Pretrain => {
            let (_, report) = cmd_pretrain(&cfg, seed, out)?;
            if let Some(last) = report.epoch_losses.last() {
                println!("pretrained {} epochs, final loss {last:.4}", report.epoch_losses.len());
            }
        }
        Command::Adapt => {
            let art = cmd_adapt(&cfg, seed, out)?;
            print_means("adapted", &art.metrics.means());
        }
        Command::Eval { split } => {
            let split = match split {
                SplitArg::Source => Split::Source,
                SplitArg::Target => Split::Target,
            };
            let table = cmd_eval(&cfg, seed, out, split)?;
            print_means(split.name(), &table.means());
        }
        Command::Gradcheck { scope, instances } => {
            let scope = match scope {
                ScopeArg::Ops => Scope::Ops,
                ScopeArg::Losses => Scope::Losses,
                ScopeArg::Network => Scope::Network,
                ScopeArg::All => Scope::All,
            };
            let reports = cmd_gradcheck(scope, instances, seed);
            println!("{:<28} {:>10} {:>14}  status", "component", "instances", "max_rel_err");
            for r in &reports {
                let status = if r.passed { "pass" } else { "FAIL" };
                println!("{:<28} {:>10} {:>14.3e}  {status}", r.name, r.instances, r.max_rel_err);
            }
            return Ok(reports.iter().all(|r| r.passed));
        }
        Command::Ablate => {
            let table = cmd_ablate(&cfg, seed, out)?;
            print!("{}", table.to_csv());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match RunConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => return fail(2, e.to_json()),
    };
    match run(cli, cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => match e.downcast_ref::<ConfigError>() {
            Some(c) => fail(2, c.to_json()),
            None => fail(1, serde_json::json!({"error": "runtime", "message": format!("{e:#}")})),
        },
    }
}
