//! `nrdf`: solve, sweep, simulate, and verify joint nonanticipative
//! rate-distortion problems for two-process Gauss-Markov models.
//!
//! Exit codes: 0 success, 1 error, 2 boundary regime detected,
//! 3 verification failure.

mod commands;
mod grid;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "nrdf", version, about = "Joint nonanticipative rate-distortion solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct SolveArgs {
    /// Problem file (JSON).
    problem: PathBuf,
    /// Write the full JSON report here (stdout summary always printed).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Write per-stage quantities as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Run the independent minimizer and report the signed gap; on
    /// boundary-detected problems this is where the numbers come from.
    #[arg(long)]
    oracle: bool,
    /// Use the scalar closed-form path (requires a scalar two-process model).
    #[arg(long)]
    closed_form: bool,
    /// Report rates in bits instead of nats in the summary.
    #[arg(long)]
    bits: bool,
}

#[derive(Args, Debug, Clone)]
struct SweepArgs {
    /// Problem file (JSON); its budgets are replaced by the grid.
    problem: PathBuf,
    /// Grid for the first budget as start:end:count.
    #[arg(long, value_name = "A:B:K")]
    delta1_grid: String,
    /// Grid for the second budget as start:end:count.
    #[arg(long, value_name = "A:B:K")]
    delta2_grid: String,
    /// Output CSV path (defaults to stdout).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Resolve boundary-detected cells with the independent minimizer.
    #[arg(long)]
    oracle: bool,
    /// Worker threads for grid cells (default 1: sequential).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug, Clone)]
struct SimulateArgs {
    /// Problem file (JSON).
    problem: PathBuf,
    /// Number of Monte-Carlo paths.
    #[arg(long, default_value_t = 100_000)]
    paths: usize,
    /// RNG seed (per-path substreams are derived from it).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale every channel gain by this factor (negative control).
    #[arg(long)]
    perturb_h: Option<f64>,
    /// Worker threads for path generation (default 1: sequential).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Write the full JSON report here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct VerifyArgs {
    /// Problem file (JSON).
    problem: PathBuf,
    /// Number of Monte-Carlo paths.
    #[arg(long, default_value_t = 100_000)]
    paths: usize,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale every channel gain by this factor (negative control; the
    /// Monte-Carlo checks are expected to fail and exit 3).
    #[arg(long)]
    perturb_h: Option<f64>,
    /// Run only the deterministic checks.
    #[arg(long)]
    skip_mc: bool,
    /// Worker threads for path generation (default 1: sequential).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Write the full JSON report here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one problem and report rate, schedule, realization, residuals.
    Solve(SolveArgs),
    /// Evaluate the rate surface over a budget grid.
    Sweep(SweepArgs),
    /// Sample the synthesized channel and report empirical statistics.
    Simulate(SimulateArgs),
    /// Run the full property suite and exit nonzero on any failure.
    Verify(VerifyArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Solve(args) => commands::solve(&args),
        Command::Sweep(args) => commands::sweep(&args),
        Command::Simulate(args) => commands::simulate(&args),
        Command::Verify(args) => commands::verify(&args),
    };
    match code {
        Ok(code) => code,
        Err(err @ nrdf_core::Error::BoundaryRegime { .. }) => {
            eprintln!("error: {err}");
            eprintln!("hint: rerun without --closed-form, or with --oracle");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
