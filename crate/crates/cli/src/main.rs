//! Batch front end for measurement-based participation factor estimation.
//!
//! ```text
//! mpf simulate --config run.json            generate a trajectory dataset
//! mpf estimate --config run.json            run the estimation pipeline
//! mpf compare  --config run.json            model PFs vs estimated MPFs
//! mpf diagnose --config run.json            sampling-matrix conditioning
//! ```
//!
//! Exit codes: 0 success, 2 configuration or missing-input error,
//! 3 numerical failure, 4 estimation diagnosed the dataset as unusable.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

use commands::{cmd_compare, cmd_diagnose, cmd_estimate, cmd_simulate, CmdError};
use config::{ResolvedConfig, RunConfig};

#[derive(Parser)]
#[command(
    name = "mpf",
    about = "Participation factors of oscillatory modes, estimated from measured trajectories"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overriding the config's output.dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed override for dataset generation.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Suppress result tables on stdout.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic measurement dataset (CSV files + manifest).
    Simulate,
    /// Estimate participation factors from a dataset manifest.
    Estimate,
    /// Compare a prior estimate against model-based participation factors.
    Compare,
    /// Conditioning diagnostics of each trajectory's sampling matrix.
    Diagnose,
}

fn run(cli: &Cli) -> Result<(), CmdError> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| CmdError::Config("--config PATH is required".into()))?;
    let raw = RunConfig::from_file(config_path).map_err(CmdError::Config)?;
    let resolved = ResolvedConfig::resolve(&raw, cli.out.as_deref(), cli.seed)
        .map_err(CmdError::Config)?;
    match cli.command {
        Command::Simulate => cmd_simulate(&resolved, cli.quiet),
        Command::Estimate => cmd_estimate(&resolved, cli.quiet).map(|_| ()),
        Command::Compare => cmd_compare(&resolved, cli.quiet).map(|_| ()),
        Command::Diagnose => cmd_diagnose(&resolved, cli.quiet).map(|_| ()),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        eprintln!("error: {}", err.message());
        std::process::exit(err.exit_code());
    }
}
