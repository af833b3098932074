//! `isoreg` command-line driver.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Exit code for unreadable or inconsistent configurations and arguments.
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;
pub const EXIT_STABILITY: u8 = 4;
pub const EXIT_VALIDATION: u8 = 5;
/// Invalid numerical input, including requests outside the explicit regime.
pub const EXIT_INPUT: u8 = 6;

#[derive(Debug, Parser)]
#[command(name = "isoreg", version, about = "Pollution regulation of electricity producers: value functions, contracts and Monte Carlo")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Directory receiving the CSV outputs.
    #[arg(long, global = true, env = "ISOREG_OUT_DIR", default_value = "out")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Minimum-cost dispatch without regulation.
    Dispatch {
        /// Scenario file (JSON).
        config: PathBuf,
    },

    /// Solve the regulator's value function and write the surface.
    Solve {
        /// Scenario file (JSON).
        config: PathBuf,
        /// Freeze the plan: `dispatch` or comma-separated edge flows.
        #[arg(long)]
        fixed_plan: Option<String>,
        #[command(flatten)]
        grid: GridArgs,
        /// Write every k-th time slice.
        #[arg(long)]
        t_stride: Option<usize>,
        /// Write every k-th pollution node.
        #[arg(long, default_value_t = 1)]
        ell_stride: usize,
    },

    /// Monte Carlo simulation under a policy.
    Simulate {
        /// Scenario file (JSON).
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = PolicyKind::Optimal)]
        policy: PolicyKind,
        /// Plan used by the `fixed`, `closed` and `unregulated` policies:
        /// `dispatch` or comma-separated edge flows.
        #[arg(long, default_value = "dispatch")]
        plan: String,
        /// Number of paths (defaults to the scenario setting).
        #[arg(long)]
        paths: Option<usize>,
        /// Random seed (defaults to the scenario setting).
        #[arg(long)]
        seed: Option<u64>,
        /// Time step (defaults to the scenario setting).
        #[arg(long)]
        dt: Option<f64>,
        #[command(flatten)]
        grid: GridArgs,
    },

    /// Optimise over plans held constant in time.
    ConstantPlan {
        /// Scenario file (JSON).
        config: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
    },

    /// Re-solve and simulate for several values of one parameter.
    Sensitivity {
        /// Scenario file (JSON).
        config: PathBuf,
        /// Parameter to vary.
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
        /// Number of paths per value.
        #[arg(long, default_value_t = 200)]
        paths: usize,
        /// Random seed (defaults to the scenario setting).
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        grid: GridArgs,
    },
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct GridArgs {
    /// Grid overrides `key=value` with keys n_ell, n_t, ell_min, ell_max.
    #[arg(long = "grid", value_delimiter = ',')]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyKind {
    /// Solved value function with optimised plans.
    Optimal,
    /// Solved value function with a frozen plan.
    Fixed,
    /// Explicit sensitivities with a frozen plan.
    Closed,
    /// No contract: frozen plan, zero effort.
    Unregulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Sigma,
    Rho,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use isoreg::Error;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
                Error::Infeasible(_) => EXIT_INFEASIBLE,
                Error::Stability { .. } => EXIT_STABILITY,
                Error::Validation(_) => EXIT_VALIDATION,
                Error::Input(_) | Error::Regime(_) => EXIT_INPUT,
                Error::Io(_) | Error::Csv(_) => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
