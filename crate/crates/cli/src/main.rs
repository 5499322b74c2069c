//! `isda`: train, verify and benchmark implicit semantic data augmentation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error,
//! 3 a checked property or bound was violated.

mod artifacts;
mod commands;
mod config;
mod props;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;

#[derive(Parser)]
#[command(name = "isda", version, about = "Implicit semantic data augmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand; given after the subcommand name so
/// repeated overrides accumulate in order.
#[derive(Args)]
struct Common {
    /// TOML (or .json) run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for all artifacts.
    #[arg(long, default_value = "isda-out")]
    out: PathBuf,
    /// `key.path=value`, applied in order after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised training; writes metrics.csv, tracker.snap and summary.json.
    Train(Common),
    /// Semi-supervised training on a labeled subset plus unlabeled inputs.
    TrainSemi(Common),
    /// Trains while checking the surrogate against a Monte-Carlo estimate.
    VerifyBound(Common),
    /// Explicit augmentation over a range of sample counts against the surrogate.
    SweepM(Common),
    /// One training run per initial strength.
    SweepLambda(Common),
    /// One training run per covariance mode plus a cross-entropy baseline.
    Ablate(Common),
    /// Randomized invariant checks of the library.
    TestProps(Common),
    /// Overhead from two finished runs, or measured afresh when none are given.
    ReportTiming {
        #[command(flatten)]
        common: Common,
        /// Cross-entropy run directory.
        #[arg(long)]
        ce: Option<PathBuf>,
        /// Augmented run directory.
        #[arg(long)]
        isda: Option<PathBuf>,
    },
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("ISDA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Config(format!("ISDA_THREADS={raw} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Runtime(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    let common = match &cli.command {
        Command::Train(c)
        | Command::TrainSemi(c)
        | Command::VerifyBound(c)
        | Command::SweepM(c)
        | Command::SweepLambda(c)
        | Command::Ablate(c)
        | Command::TestProps(c)
        | Command::ReportTiming { common: c, .. } => c,
    };
    let cfg =
        config::resolve(common.config.as_deref(), &common.overrides, common.seed).map_err(|e| Failure::Config(e.0))?;
    let out = common.out.as_path();
    match &cli.command {
        Command::Train(_) => commands::train(&cfg, out),
        Command::TrainSemi(_) => commands::train_semi(&cfg, out),
        Command::VerifyBound(_) => commands::verify_bound(&cfg, out),
        Command::SweepM(_) => commands::sweep_m(&cfg, out),
        Command::SweepLambda(_) => commands::sweep_lambda(&cfg, out),
        Command::Ablate(_) => commands::ablate(&cfg, out),
        Command::TestProps(_) => commands::test_props(&cfg, out),
        Command::ReportTiming { ce, isda, .. } => {
            commands::report_timing_cmd(&cfg, out, ce.as_deref(), isda.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Violation(msg)) => {
            eprintln!("violation: {msg}");
            ExitCode::from(3)
        }
    }
}
