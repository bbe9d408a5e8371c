use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mvdream::io::load_checkpoint;
use mvdream::{
    composite_grad_check, dump_reconstructions, env_demo, run_eval, run_training, ExperimentConfig, Result,
};

#[derive(Parser)]
#[command(name = "mvdream", version, about = "Multi-view contrastive world-model experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent; writes metrics.jsonl, timing.jsonl and checkpoint.mvwm.
    Train(Common),
    /// Evaluate a checkpoint with the noise-free policy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        episodes: usize,
    },
    /// Write observed and reconstructed views of one episode as P5 graymaps.
    DumpRecon {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        frames: usize,
    },
    /// Finite-difference check of the composite world-model objective.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        probes: usize,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Render oracle-policy frames of every view.
    EnvDemo {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        frames: usize,
    },
}

/// Resolves the config: the file (or `fallback` text, or defaults), then
/// `--seed` and `--set` overrides.
fn resolve(common: &Common, fallback: Option<&str>) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.config, fallback) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(text)) => ExperimentConfig::parse(text)?,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_config(common: &Common, path: &Path) -> Result<(mvdream::core::checkpoint::Checkpoint, ExperimentConfig)> {
    let ckpt = load_checkpoint(path)?;
    let cfg = resolve(common, Some(&ckpt.config_text))?;
    Ok((ckpt, cfg))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = resolve(&common, None)?;
            let summary = run_training(&cfg, &common.out)?;
            println!("metrics: {}", summary.metrics.display());
            println!("checkpoint: {}", summary.checkpoint.display());
            if let Some(e) = summary.final_eval {
                println!("final eval return: {:.3} ± {:.3}", e.mean, e.std);
            }
        }
        Command::Eval {
            common,
            checkpoint,
            episodes,
        } => {
            let (ckpt, cfg) = checkpoint_config(&common, &checkpoint)?;
            let summary = run_eval(&ckpt, &cfg, episodes)?;
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
        }
        Command::DumpRecon {
            common,
            checkpoint,
            frames,
        } => {
            let (ckpt, cfg) = checkpoint_config(&common, &checkpoint)?;
            let dumped = dump_reconstructions(&ckpt, &cfg, frames, Some(&common.out))?;
            println!("wrote {} frames to {}", dumped.len(), common.out.display());
        }
        Command::GradCheck { common, probes, tol } => {
            let cfg = resolve(&common, None)?;
            let report = composite_grad_check(&cfg, probes, tol)?;
            println!(
                "{} probes, max relative error {:.3e}, tolerance {tol:.1e}: {}",
                report.entries.len(),
                report.max_rel_error(),
                if report.passed() { "pass" } else { "FAIL" }
            );
            if !report.passed() {
                return Err(mvdream::HarnessError::Config("gradient check failed".into()));
            }
        }
        Command::EnvDemo { common, frames } => {
            let cfg = resolve(&common, None)?;
            let total = env_demo(&cfg, frames, &common.out)?;
            println!("oracle return over {frames} frames: {total:.3}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
