use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use bitagent::commands::{self, EvalOptions, Stage};
use bitagent::config::Config;
use clap::{Parser, Subcommand};

/// Desk-scale semantic world-model agent: collect data, train, evaluate and
/// run the ablation and transfer protocols.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// Config file of `key = value` lines; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect the offline datasets of the training embodiments.
    Collect,
    /// Run the pretraining phase only.
    Pretrain,
    /// Run the full schedule, or only the behavior phase with `--init`.
    Train {
        /// Pretrained checkpoint to resume from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a checkpoint and write score tables and plots.
    Evaluate {
        /// Defaults to `<out>/train/checkpoint.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate even when the datasets differ from the checkpoint's.
        #[arg(long)]
        allow_dataset_mismatch: bool,
    },
    /// Train and score every rung of the ablation ladder.
    Ablate,
    /// Train on the first training embodiment, score on the others.
    Transfer,
    /// Print the resolved config.
    ShowConfig,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::parse("")?,
    };
    if let Some(s) = cli.seed {
        cfg.experiment.seed = s;
    }
    let out = cli.out.unwrap_or_else(|| PathBuf::from(&cfg.experiment.output_dir));
    match cli.command {
        Command::Collect => {
            commands::collect(&cfg, &out)?;
        }
        Command::Pretrain => {
            let dir = commands::train(&cfg, &out, Stage::Pretrain, None)?;
            eprintln!("wrote {}", dir.display());
        }
        Command::Train { init } => {
            let dir = commands::train(&cfg, &out, Stage::Train, init.as_deref())?;
            eprintln!("wrote {}", dir.display());
        }
        Command::Evaluate {
            checkpoint,
            allow_dataset_mismatch,
        } => {
            commands::evaluate(
                &cfg,
                &out,
                &EvalOptions {
                    checkpoint,
                    allow_dataset_mismatch,
                },
            )?;
        }
        Command::Ablate => {
            commands::ablate(&cfg, &out)?;
        }
        Command::Transfer => {
            commands::transfer(&cfg, &out)?;
        }
        Command::ShowConfig => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
