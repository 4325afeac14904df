//! `mdico` command-line entry point.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on configuration or
//! input errors.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdico::baselines::Variant;

use crate::config::{ExperimentConfig, UsageError};

#[derive(Parser)]
#[command(name = "mdico", version, about = "Multi-modal co-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the training and evaluation seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `train.max_epochs`.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Upper bound on concurrently running folds and probes.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into `<output_dir>/dataset`.
    GenData(Common),
    /// Train one variant on run 0, fold 0 of the configured split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Variant to train (default: first in `variants`).
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Evaluate single-modality predictions of saved checkpoints.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint files (default: every checkpoint in `<output_dir>/train`).
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Also score the shared-only and specific-only feature spaces.
        #[arg(long)]
        space_metrics: bool,
    },
    /// Cross-validate every configured variant.
    Ablate(Common),
    /// Compare analytic and finite-difference gradients of every loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        /// Check an evenly strided subset of each parameter block.
        #[arg(long)]
        max_entries_per_block: Option<usize>,
    },
    /// Plot the four loss terms of a training trace.
    PlotLosses {
        /// Loss trace CSV written by `train` or `ablate`.
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    if let Some(e) = common.max_epochs {
        cfg.train.max_epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_jobs<R: Send>(common: &Common, f: impl FnOnce() -> R + Send) -> R {
    mdico::par::with_jobs(common.jobs, f)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = load(&common)?;
            commands::gen_data(&cfg)?;
        }
        Command::Train { common, variant } => {
            let cfg = load(&common)?;
            with_jobs(&common, || commands::train(&cfg, variant))?;
        }
        Command::Eval {
            common,
            checkpoint,
            space_metrics,
        } => {
            let cfg = load(&common)?;
            with_jobs(&common, || commands::eval(&cfg, &checkpoint, space_metrics))?;
        }
        Command::Ablate(common) => {
            let cfg = load(&common)?;
            with_jobs(&common, || commands::ablate(&cfg))?;
        }
        Command::Gradcheck {
            common,
            batch_size,
            max_entries_per_block,
        } => {
            let cfg = load(&common)?;
            let (_, passed) = with_jobs(&common, || commands::gradcheck(&cfg, batch_size, max_entries_per_block))?;
            if !passed {
                anyhow::bail!("gradient check exceeded tolerance {}", mdico::eval::GRADCHECK_TOLERANCE);
            }
        }
        Command::PlotLosses { trace, out } => {
            for p in plot::plot_losses(&trace, &out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some() || e.downcast_ref::<mdico::Error>().is_some_and(mdico::Error::is_config)
    });
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
