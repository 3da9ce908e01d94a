//! Command-line front end for `pvcell`: configuration, the
//! `solve | sweep | simulate | figures` subcommands and CSV output.

// Guards are written `!(x > a)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no convergence: {0}")]
    NonConvergence(String),
    #[error("infeasible: p = {p} exceeds the critical arrival probability p_c = {p_c}")]
    Infeasible { p: f64, p_c: f64 },
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::NonConvergence(_) => 3,
            CliError::Infeasible { .. } => 4,
            CliError::Io(_) | CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pvcell", version, about = "Mean-field retransmission model for Poisson-Voronoi downlinks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat key=value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable and applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output file (solve, sweep, simulate) or directory (figures).
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Worker threads for sweeps and replications.
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    /// Master seed; overrides the `seed` key.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Equilibrium at a single (p, K).
    Solve,
    /// Equilibrium over the (p, K) grid.
    Sweep,
    /// Slot-level simulation of a tagged link.
    Simulate,
    /// Data files behind figures 1 to 6.
    Figures {
        /// Figure ids; all six when omitted.
        ids: Vec<u32>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be >= 1".into()));
        }
        // Fails only if a pool already exists, in which case it is reused.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = cli.out.as_deref();
    match cli.command {
        Command::Solve => commands::cmd_solve(&cfg, out).map(drop),
        Command::Sweep => commands::cmd_sweep(&cfg, out).map(drop),
        Command::Simulate => commands::cmd_simulate(&cfg, out).map(drop),
        Command::Figures { ids } => {
            if !ids.is_empty() {
                cfg.set_figures(ids)?;
            }
            let dir = out.map(PathBuf::from).unwrap_or_else(|| PathBuf::from("figures"));
            for path in commands::cmd_figures(&cfg, &dir)? {
                eprintln!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}
