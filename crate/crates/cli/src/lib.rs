//! Command-line front end for the `advlab` binary.
//!
//! Exit codes: 0 success, 1 I/O error, 2 configuration error, 3 runtime
//! abort (non-finite advantage or ratio), 4 verification failure.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use advlab_core::verify::Suite;
use advlab_core::EstimatorKind;
use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

/// Caps the worker count; 0 lets the pool decide.
pub const THREADS_ENV: &str = "ADVLAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "advlab", version, about = "Critic-free advantage estimator laboratory")]
pub struct Cli {
    /// Config file (`key = value` lines under `[section]` headers).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config key; repeatable. Bare keys or `section.key`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (`run.out`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Master seed (`train.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one policy and write metrics.csv, policy.ckpt and config.resolved.
    Train,
    /// Run oracle probe suites; exit 4 unless every probe passes.
    Verify {
        /// bias, kl, gradients or all.
        suite: Suite,
    },
    /// Train every (estimator, seed) pair and write comparison tables.
    Compare {
        /// Comma-separated estimator keys (default: `compare.estimators`).
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<EstimatorKind>>,
        /// Comma-separated seeds (default: `compare.seeds`).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

/// Builds the effective config: file (or defaults), then `--set` overrides
/// in order, then `--out` / `--seed`, then `ADVLAB_THREADS`.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, String> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| e.to_string())?,
        None => ExperimentConfig::default(),
    };
    for item in &cli.set {
        cfg.apply_override(item).map_err(|e| e.to_string())?;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Ok(v) = std::env::var(THREADS_ENV) {
        cfg.train.threads = v
            .trim()
            .parse()
            .map_err(|_| format!("{THREADS_ENV} must be a non-negative integer, got `{v}`"))?;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> i32 {
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("config error: {msg}");
            return EXIT_CONFIG;
        }
    };
    match cli.command {
        Command::Train => commands::cmd_train(&cfg),
        Command::Verify { suite } => commands::cmd_verify(&cfg, suite),
        Command::Compare { estimators, seeds } => {
            let estimators = estimators.unwrap_or_else(|| cfg.compare.estimators.clone());
            let seeds = seeds.unwrap_or_else(|| cfg.compare.seeds.clone());
            commands::cmd_compare(&cfg, &estimators, &seeds)
        }
    }
}
