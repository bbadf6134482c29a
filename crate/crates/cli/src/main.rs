//! `lyapctl`: stage-by-stage driver for certified feature reconstruction.
//!
//! Exit codes: 0 success, 1 internal/numerical failure, 2 input or
//! validation error, 3 certification not achieved.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lyapctl_core::Error;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Usage(String),
    /// Number of seeds (or checks) that did not certify.
    NotCertified(usize),
    /// A worker process failed with this exit code.
    Worker(u8),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_input_error() => 2,
            CliError::Core(_) => 1,
            CliError::Usage(_) => 2,
            CliError::NotCertified(_) => 3,
            CliError::Worker(c) => *c,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::NotCertified(n) => write!(f, "{n} seed(s) not certified"),
            CliError::Worker(c) => write!(f, "a seed worker exited with code {c}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "lyapctl",
    version,
    about = "Lyapunov-certified node feature reconstruction for SGC"
)]
pub struct Cli {
    /// Flat `key = value` config file. Defaults to `<run-dir>/config.txt`
    /// when that exists.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Directory holding all artifacts of this run.
    #[arg(long, global = true, default_value = "runs/default")]
    pub run_dir: PathBuf,

    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Run independent seeds in up to N worker processes.
    #[arg(long, global = true, default_value_t = 1)]
    pub parallel_seeds: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted-partition graph bundle.
    Synth(SynthArgs),
    /// Reduce features and draw per-seed splits.
    Prepare,
    /// Train the SGC baseline for each seed.
    TrainGnn,
    /// Train and certify controller and Lyapunov networks for each seed.
    Cegis,
    /// Replace class features, report accuracies, write results.json.
    Eval,
    /// Re-verify stored networks.
    Verify(VerifyArgs),
    /// Write the propagated embeddings of one seed as CSV.
    ExportEmbeddings(ExportArgs),
    /// prepare, train-gnn, cegis and eval in sequence.
    Run,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 20)]
    pub nodes_per_block: usize,
    #[arg(long, default_value_t = 0.5)]
    pub p_in: f64,
    #[arg(long, default_value_t = 0.05)]
    pub p_out: f64,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Seed whose artifacts to verify; defaults to the first configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Explicit checkpoints; all three must be given together.
    #[arg(long, requires_all = ["lyapunov", "plant"])]
    pub controller: Option<PathBuf>,
    #[arg(long)]
    pub lyapunov: Option<PathBuf>,
    #[arg(long)]
    pub plant: Option<PathBuf>,
    /// Where to write the report; printed to stdout either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to `<run-dir>/seed-<s>/embeddings.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("LYAPCTL_THREADS") {
        let n: usize = v.parse().map_err(|_| {
            CliError::Usage(format!(
                "LYAPCTL_THREADS must be a positive integer, got {v:?}"
            ))
        })?;
        if n == 0 {
            return Err(CliError::Usage("LYAPCTL_THREADS must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| commands::dispatch(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lyapctl: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
