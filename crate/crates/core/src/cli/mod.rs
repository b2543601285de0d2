//! The `bnmatch` experiment runner.
//!
//! Every subcommand reads an optional JSON config (strict keys), applies
//! command-line overrides and writes its outputs under `out_dir` through
//! temp-file-then-rename. Exit status: 0 success, 1 config error, 2 runtime
//! error, 3 failed check.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "bnmatch", version, about = "Source-free domain adaptation by BN-statistics matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed override (replaces the configured seed list with one seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Upper bound on parallel runs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Tenfold fewer training iterations; half the oracle sample counts.
    #[arg(long)]
    pub quick: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on the labeled source domain.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Adapt a pretrained checkpoint to unlabeled target data.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file or pretrain output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Accuracy of a checkpoint on a labeled test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Adapted accuracy over a grid of matching-loss weights.
    SweepLambda {
        #[command(flatten)]
        common: Common,
    },
    /// Adapted accuracy over a grid of target-data fractions.
    SweepSize {
        #[command(flatten)]
        common: Common,
    },
    /// Gradient, KL, total-variation and Pinsker self-checks.
    OracleCheck {
        #[command(flatten)]
        common: Common,
    },
}

/// Runs a parsed command line and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Pretrain { common } => commands::pretrain(&common),
        Command::Adapt {
            common,
            checkpoint,
            lambda,
        } => commands::adapt(&common, checkpoint, lambda),
        Command::Eval { common, checkpoint } => commands::eval(&common, checkpoint),
        Command::SweepLambda { common } => commands::sweep(&common, commands::SweepKind::Lambda),
        Command::SweepSize { common } => commands::sweep(&common, commands::SweepKind::Size),
        Command::OracleCheck { common } => commands::oracle_check(&common),
    };
    match result {
        Ok(status) => status,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
