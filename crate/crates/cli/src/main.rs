//! `dslfm` command-line interface.
//!
//! Exit codes: 0 success, 1 data or estimation failure, 2 configuration error.

mod commands;
mod config;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Data {
        stage: &'static str,
        #[source]
        source: dslfm::Error,
    },
    #[error("cannot write output: {0}")]
    Output(#[from] std::io::Error),
}

impl RunError {
    pub fn data(stage: &'static str) -> impl FnOnce(dslfm::Error) -> RunError {
        move |source| RunError::Data { stage, source }
    }

    fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) => 2,
            RunError::Data { .. } | RunError::Output(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dslfm", version, about = "Double selection lasso factor model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML, or JSON when the extension is .json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "DSLFM_THREADS")]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Monte Carlo study on the synthetic calibration.
    Simulate,
    /// Fit the factor model to a panel.
    Fit,
    /// Risk premium of an observable factor.
    Premium,
    /// Quintile-sort backtest of a predictor.
    Backtest,
    /// Characteristic importance with a week bootstrap.
    Importance,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Premium => "premium",
            Command::Backtest => "backtest",
            Command::Importance => "importance",
        }
    }
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, RunError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads.or(cfg.threads) {
        if threads == 0 {
            return Err(RunError::Config("threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| RunError::Config(format!("cannot start worker pool: {e}")))?;
    }
    let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("dslfm-out"));
    commands::dispatch(cli.command, &cfg, &out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("dslfm: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
