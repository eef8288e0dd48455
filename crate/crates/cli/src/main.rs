//! `spa`: train, prune, report, fuse, and switch structured pruning adapters.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Overrides;
use spa_core::{Error, Result};

#[derive(Parser)]
#[command(name = "spa", version, about = "Structured pruning adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adapt a base network to a task while pruning it step by step.
    TrainPrune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = ["finetune", "splora", "lora"])]
        mode: Option<String>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long, value_parser = ["weight", "magnitude", "gradient", "taylor", "lrp"])]
        criterion: Option<String>,
        /// Final channel density of the schedule.
        #[arg(long)]
        density: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// ΔParams, FLOPs, and density of a manifest under a mode.
    Report {
        manifest: PathBuf,
        #[arg(long, default_value = "finetune", value_parser = ["finetune", "splora", "lora"])]
        mode: String,
        #[arg(long, default_value_t = 0)]
        rank: usize,
        /// Channel density kept in every group.
        #[arg(long, default_value_t = 1.0)]
        density: f64,
    },
    /// Learned-fraction curves for one n×m weight as CSV.
    Curve {
        n: usize,
        m: usize,
        rank: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Load a task delta on its base and write the compacted dense model.
    Fuse {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        delta: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run config whose evaluation split scores both models.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Activate task deltas in order on one base.
    Switch {
        #[arg(long)]
        base: PathBuf,
        #[arg(long = "delta", required = true)]
        deltas: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Worker cap from `SPA_THREADS`. All kernels currently run on the calling
/// thread, so any positive cap is honoured.
fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("SPA_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("SPA_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = thread_cap()? {
        log::debug!("worker cap {n}");
    }
    match cli.command {
        Command::TrainPrune {
            config,
            seed,
            mode,
            rank,
            criterion,
            density,
            out,
        } => commands::train_prune(
            &config,
            &Overrides {
                seed,
                mode,
                rank,
                criterion,
                density,
                out,
            },
        ),
        Command::Report {
            manifest,
            mode,
            rank,
            density,
        } => {
            println!("{}", commands::report(&manifest, &mode, rank, density)?);
            Ok(())
        }
        Command::Curve { n, m, rank, out } => {
            let csv = commands::curve(n, m, rank)?;
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Fuse {
            base,
            delta,
            out,
            config,
        } => {
            println!("{}", commands::fuse(&base, &delta, &out, config.as_deref())?);
            Ok(())
        }
        Command::Switch { base, deltas, config } => {
            println!("{}", commands::switch(&base, &deltas, config.as_deref())?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
