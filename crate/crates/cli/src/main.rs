//! `zdp`: calibration, accounting, audits, gradient checks and private
//! training from the command line.
//!
//! Exit codes: 0 success, 1 failed check or internal error, 2 usage or
//! configuration error.

mod commands;
mod config;

use clap::{Parser, Subcommand, ValueEnum};
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

/// Invalid arguments or configuration; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "zdp", version, about = "Differential privacy for complex-valued functions")]
pub struct Cli {
    /// Seed for every randomized command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppress timing lines so reruns print identical output.
    #[arg(long, global = true)]
    pub deterministic_output: bool,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Poisson,
    Uniform,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AccountingArg {
    Published,
    Circular,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Smallest noise scale meeting (eps, delta) for one release.
    Calibrate {
        #[arg(long)]
        sensitivity: f64,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        delta: f64,
    },
    /// Privacy spent by subsampled Gaussian steps, or the one-shot profile.
    Account {
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 1.0)]
        sampling_rate: f64,
        #[arg(long, default_value_t = 1)]
        steps: u64,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
        #[arg(long, value_enum, default_value_t = Mode::Poisson)]
        mode: Mode,
        #[arg(long, value_enum, default_value_t = AccountingArg::Published)]
        accounting: AccountingArg,
        /// Print delta(eps) of a single release instead.
        #[arg(long, requires = "eps")]
        profile: bool,
        #[arg(long, default_value_t = 1.0)]
        sensitivity: f64,
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Moment checks of the circular noise sampler.
    AuditNoise {
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 1_000_000)]
        n: usize,
        /// Scales the imaginary component of every draw (negative control).
        #[arg(long, default_value_t = 1.0, hide = true)]
        inject_scale: f64,
    },
    /// Monte-Carlo estimate of delta(eps) against the closed form.
    AuditDelta {
        #[arg(long)]
        sensitivity: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 10_000_000)]
        n: usize,
        /// Run the complex mechanism end to end on outputs in C^d.
        #[arg(long)]
        complex_dim: Option<usize>,
    },
    /// Finite-difference check of Wirtinger gradients for an architecture.
    Gradcheck {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Private (or baseline) training from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Non-private baseline: no noise, no clipping.
        #[arg(long)]
        no_dp: bool,
        #[arg(long)]
        progress: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Trains every activation under identical settings and seeds.
    BenchActivations {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        std::env::set_var("RAYON_NUM_THREADS", w.to_string());
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<UsageError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
