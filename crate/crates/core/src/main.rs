//! `dynhead` command line: train, evaluate, report FLOPs, export gate
//! heatmaps and sweep λ/τ on the synthetic task.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dynhead::autodiff::Checkpoint;
use dynhead::harness::{eval, heatmap, report, sweep, train, Model, RunConfig};
use dynhead::{Error, Result};

#[derive(Parser)]
#[command(name = "dynhead", version, about = "Fine-grained dynamic head on a synthetic detection task")]
struct Cli {
    /// TOML run config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set loss.lambda=0.4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch; writes metrics.csv, checkpoint.bin and config.toml.
    Train,
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on the training scenes instead.
        #[arg(long)]
        train_split: bool,
    },
    /// Per-sample realized head MACs/FLOPs over the eval split.
    FlopsReport {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Gate heatmaps (PGM + CSV) for one eval scene.
    ExportGates {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
    /// Train and evaluate every (λ, τ) pair.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = sweep::DEFAULT_LAMBDAS)]
        lambdas: Vec<f64>,
        /// Defaults to the configured `gate.tau`.
        #[arg(long, value_delimiter = ',')]
        taus: Vec<f64>,
    },
}

/// Config for a checkpoint: `--config` if given, else the config stored in
/// the checkpoint, then `--set` overrides.
fn checkpoint_config(cli: &Cli, ckpt: &Checkpoint) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => RunConfig::load(Some(p), &cli.set),
        None => RunConfig::from_toml_with_overrides(&ckpt.meta, &cli.set),
    }
}

fn load(cli: &Cli, path: &Path) -> Result<(RunConfig, Model, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = checkpoint_config(cli, &ckpt)?;
    let model = Model::new(&cfg)?;
    let fresh = model.init_params(0)?;
    let expected: Vec<_> = fresh.iter().map(|(n, t)| (n.clone(), t.shape())).collect();
    let got: Vec<_> = ckpt.params.iter().map(|(n, t)| (n.clone(), t.shape())).collect();
    if expected != got {
        return Err(Error::Config(format!("checkpoint {} does not match the model config", path.display())));
    }
    Ok((cfg, model, ckpt))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train => {
            let cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
            let dir = cfg.output_dir();
            let out = train::train(&cfg, Some(&dir))?;
            if let Some(r) = out.records.last() {
                println!(
                    "iter {} loss {} l_cls {} l_reg {} l_budget {} head_flops {}",
                    r.iter, r.loss, r.l_cls, r.l_reg, r.l_budget, 2.0 * r.head_macs
                );
            }
            println!("wrote {}", dir.display());
        }
        Command::Eval { checkpoint, train_split } => {
            let (cfg, model, ckpt) = load(cli, checkpoint)?;
            let scenes = if *train_split { train::train_scenes(&cfg)? } else { train::eval_scenes(&cfg)? };
            let m = eval::evaluate(&model, &ckpt.params, &scenes)?;
            let dir = cfg.output_dir();
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("eval.csv"), m.to_csv())?;
            print!("{}", m.to_csv());
        }
        Command::FlopsReport { checkpoint } => {
            let (cfg, model, ckpt) = load(cli, checkpoint)?;
            let dir = cfg.output_dir();
            let r = report::flops_report(&model, &ckpt.params, &train::eval_scenes(&cfg)?, Some(&dir))?;
            if let Some(s) = r.summary() {
                println!(
                    "head FLOPs avg {} max {} min {} (static head {})",
                    2.0 * s.avg,
                    2 * s.max,
                    2 * s.min,
                    2 * r.static_head_macs
                );
            }
            println!("wrote {}", dir.join(report::REPORT_FILE).display());
        }
        Command::ExportGates { checkpoint, scene } => {
            let (cfg, model, ckpt) = load(cli, checkpoint)?;
            let scenes = train::eval_scenes(&cfg)?;
            let s = scenes
                .get(*scene)
                .ok_or_else(|| Error::Config(format!("scene {scene} out of range ({} eval scenes)", scenes.len())))?;
            let dir = cfg.output_dir().join(format!("gates_scene{scene}"));
            let b = heatmap::export_gate_heatmaps(&model, &ckpt.params, s, &dir)?;
            println!("wrote {} maps to {}", b.maps.len(), dir.display());
        }
        Command::Sweep { lambdas, taus } => {
            let cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
            let taus = if taus.is_empty() { vec![cfg.gate.tau] } else { taus.clone() };
            let dir = cfg.output_dir();
            std::fs::create_dir_all(&dir)?;
            let runs = sweep::sweep(&cfg, lambdas, &taus, Some(&dir))?;
            print!("{}", sweep::sweep_csv(&runs));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
