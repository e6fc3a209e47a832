//! `alfa` command-line interface.
//!
//! Subcommands: `train`, `eval`, `ablate`, `gradcheck`. One JSON config file
//! drives a run; flags cover only run identity (seed, paths, resume).
//!
//! Exit codes are stable API: 0 ok, 2 config error, 3 numeric failure,
//! 4 checkpoint error, 5 gradcheck tolerance breach.

mod ablate;
mod eval;
mod gradcheck;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use alfa_core::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_CHECKPOINT: u8 = 4;
pub const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser)]
#[command(name = "alfa", version, about = "Adaptive inner-loop meta-learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridName {
    Table5,
    Table6,
    Steps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CheckSizeArg {
    Tiny,
    Small,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train and write checkpoint, log, and final report into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override both seeds in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on fresh tasks; report JSON goes to stdout.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of evaluation tasks.
        #[arg(long)]
        tasks: usize,
        /// Also write the per-task hyperparameter trajectories as CSV.
        #[arg(long)]
        export_trace: Option<PathBuf>,
    },
    /// Run a named grid of update-rule variants and tabulate the results.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: GridName,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference self-checks of the gradient engine.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        size: CheckSizeArg,
        /// Gradcheck tolerances are calibrated for 64-bit only.
        #[arg(long, default_value = "64", value_parser = ["64"])]
        precision: String,
        /// Corrupt the analytic gradient of one op (harness self-test).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

/// Worker-thread cap from the environment; 1 (fully sequential) by default.
pub fn env_threads() -> usize {
    std::env::var("ALFA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

pub fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
        Error::CheckpointVersion { .. }
        | Error::CheckpointCorrupt(_)
        | Error::StructuralConflict { .. } => EXIT_CHECKPOINT,
        _ => EXIT_NUMERIC,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, seed, resume } => train::run(&config, &out, seed, resume.as_deref()),
        Command::Eval { config, checkpoint, tasks, export_trace } => {
            eval::run(&config, &checkpoint, tasks, export_trace.as_deref())
        }
        Command::Ablate { config, grid, out } => ablate::run(&config, grid, &out),
        Command::Gradcheck { size, precision: _, corrupt } => {
            return gradcheck::run(size, corrupt.as_deref());
        }
    };
    match result {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
