//! Command-line front end: ingest a TOML problem configuration, orchestrate
//! the reduction pipeline, and emit plot-ready CSV/report artifacts.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "delay-ssm",
    version,
    about = "Reduced-order modeling of delay differential equations on spectral submanifolds",
    after_help = "Exit codes: 0 success, 2 configuration error, 3 numerical failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory (overrides the config's output.directory).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Override the manifold expansion order.
    #[arg(long, global = true, value_name = "K")]
    order: Option<u32>,

    /// Override the number of chain stages N.
    #[arg(long = "grid-n", global = true, value_name = "N")]
    grid_n: Option<usize>,

    /// Cross-check results against reference integrations / exact roots.
    #[arg(long, global = true)]
    validate: bool,

    /// Size of the worker thread pool (default: all cores).
    #[arg(long, global = true, value_name = "T")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Chain spectrum, Hopf parameter sweeps, and discretization convergence.
    Spectrum,
    /// Compute and persist the spectral submanifold and its reduced model.
    Ssm,
    /// Reduced-model predictions: backbone, limit cycles, forced response, torus.
    Predict,
    /// Reference time integration of the delay equation or the chain.
    Simulate,
}

/// Error classified for the exit code contract.
pub enum CliError {
    Config(anyhow::Error),
    Numerical(anyhow::Error),
}

/// Extension helpers to tag error provenance.
pub trait Classify<T> {
    fn config_err(self) -> Result<T, CliError>;
    fn num_err(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config_err(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Config(e.into()))
    }

    fn num_err(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Numerical(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        // A second initialization (e.g. under tests) is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(e)) => {
            eprintln!("numerical failure: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn real_main(cli: Cli) -> Result<(), CliError> {
    let config_path = cli
        .config
        .ok_or_else(|| anyhow!("--config PATH is required"))
        .config_err()?;
    let text = std::fs::read_to_string(&config_path)
        .with_context(|| format!("cannot read config {}", config_path.display()))
        .config_err()?;
    let mut cfg = RunConfig::from_toml(&text)
        .with_context(|| format!("invalid config {}", config_path.display()))
        .config_err()?;

    if let Some(order) = cli.order {
        if order < 3 {
            return Err(anyhow!("--order must be at least 3, got {order}")).config_err();
        }
        cfg.ssm.order = order;
    }
    if let Some(n) = cli.grid_n {
        if n == 0 {
            return Err(anyhow!("--grid-n must be positive")).config_err();
        }
        cfg.discretization.n = n;
    }

    let out_dir = cli
        .out
        .or_else(|| cfg.output.directory.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create output directory {}", out_dir.display()))
        .config_err()?;

    match cli.command {
        Command::Spectrum => commands::cmd_spectrum(&cfg, &out_dir, cli.validate),
        Command::Ssm => commands::cmd_ssm(&cfg, &out_dir, cli.validate),
        Command::Predict => commands::cmd_predict(&cfg, &out_dir, cli.validate),
        Command::Simulate => commands::cmd_simulate(&cfg, &out_dir, cli.validate),
    }
}
