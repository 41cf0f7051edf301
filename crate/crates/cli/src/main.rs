//! Experiment driver: simulate | estimate | compare | diagnose.
//!
//! Every command reads one JSON config (see `config.rs` for the schema),
//! applies `--set KEY=VALUE` overrides, writes its data files plus a
//! `manifest.json` into the output directory, and exits with
//!
//! * 0 on success,
//! * 2 on configuration errors,
//! * 3 on numerical blow-up,
//! * 4 when `--check` was passed and a verified inequality failed.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use artifacts::ArtifactWriter;
use commands::CommandError;
use config::{apply_override, RunConfig};

#[derive(Parser)]
#[command(name = "cghybrid", version, about = "Ensemble density estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Path to the JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-key config override, e.g. --set model.params.epsilon=0.1
    /// (repeatable).
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,

    /// Output directory (overrides output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed (overrides sim.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Fail (exit 4) when a checked inequality is violated
    /// (compare/diagnose).
    #[arg(long, global = true)]
    check: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the ensemble and export trajectories and running
    /// variances.
    Simulate,
    /// Run the hybrid pipeline and export density panels, posterior
    /// statistics and mixture snapshots at the evaluation times.
    Estimate,
    /// Sample-size scaling experiment: MISE and sampling bounds across L
    /// for the hybrid, direct-kernel and hidden-marginal estimators.
    Compare,
    /// Structural checks, Gramians, covariance bounds and the contraction
    /// experiment.
    Diagnose,
}

fn run(cli: Cli) -> Result<(), CommandError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CommandError::Config(format!("thread pool: {e}")))?;
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CommandError::Config("--config PATH is required".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CommandError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut raw: Value = serde_json::from_str(&text)
        .map_err(|e| CommandError::Config(format!("invalid JSON: {e}")))?;
    for spec in &cli.overrides {
        apply_override(&mut raw, spec)?;
    }
    if let Some(seed) = cli.seed {
        apply_override(&mut raw, &format!("sim.seed={seed}"))?;
    }
    if let Some(out) = &cli.out {
        apply_override(&mut raw, &format!("output.dir={}", out.display()))?;
    }
    let cfg = RunConfig::from_value(raw.clone())?;
    let writer = ArtifactWriter::create(std::path::Path::new(&cfg.output.dir))?;
    match cli.command {
        Command::Simulate => commands::cmd_simulate(&cfg, raw, writer),
        Command::Estimate => commands::cmd_estimate(&cfg, raw, writer),
        Command::Compare => commands::cmd_compare(&cfg, raw, writer, cli.check),
        Command::Diagnose => commands::cmd_diagnose(&cfg, raw, writer, cli.check),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CommandError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(CommandError::Io(e)) => {
            eprintln!("io error: {e}");
            ExitCode::from(2)
        }
        Err(CommandError::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
        Err(CommandError::CheckFailed(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(4)
        }
    }
}
