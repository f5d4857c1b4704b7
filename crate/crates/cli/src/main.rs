//! `nnpp`: train passport-protected networks, attack them, verify ownership
//! and tabulate results.
//!
//! Exit codes: 0 success or positive verdict, 1 negative verdict or
//! incomplete runs, 2 usage, config or artifact errors, 3 numeric failure.

mod commands;
mod report;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nnpp_core::attack::AttackKind;
use nnpp_core::Error;

#[derive(Parser, Debug)]
#[command(name = "nnpp", version, about = "Passport-protected CNN toolkit")]
pub struct Cli {
    /// Print progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

/// Experiment config with command-line adjustments.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Replaces the experiment seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted-key override, e.g. `train.epochs=5`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a protected network and record its accuracy and signature curve.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also train the passport-free twin and record its accuracy.
        #[arg(long)]
        baseline: bool,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a fake-passport or reverse-engineering attack on a trained run.
    Attack {
        /// Run directory written by `train`.
        run: PathBuf,
        /// t1, t2, t3 or reveng.
        #[arg(long)]
        kind: AttackKind,
        #[arg(long)]
        trials: Option<usize>,
        /// Reverse-engineering epochs.
        #[arg(long)]
        budget_epochs: Option<usize>,
        /// Attack seed; defaults to one derived from the run seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a claimed passport against a suspect network.
    Verify {
        /// Run directory holding the recorded evidence.
        run: PathBuf,
        /// Suspect checkpoint; defaults to the run's own.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Claimed passport; defaults to the run's own.
        #[arg(long)]
        passport: Option<PathBuf>,
        /// Verdict file; defaults to `verdict.json` in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate inconsistency and strength over the runs under a directory.
    Report { dir: PathBuf },
    /// Generate a passport for the configured architecture.
    GenPassport {
        #[command(flatten)]
        config: ConfigArgs,
        /// Passport-free reference checkpoint (feature-map passports).
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the configured dataset as IDX files plus a reloadable spec.
    DatasetGen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Numerics { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
