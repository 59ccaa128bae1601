//! Command-line front end: config parsing, the `validate`, `analyze`,
//! `simulate` and `figure` commands, and their file outputs.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{FigureSettings, Overrides, DEFAULT_FIGURE_SEED, FIG5_MAX_LAG};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "openchain", version, about = "Open Markov chains: analytics and simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a model and print its structural diagnostics.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Stationary mean, covariance, correlations and outgoing moments.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        lags: Option<Vec<u32>>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Simulate and compare against the analytics.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        lags: Option<Vec<u32>>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Regenerate a figure's data.
    Figure {
        which: FigureKind,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FIGURE_SEED)]
        seed: u64,
        #[arg(long, default_value_t = config::DEFAULT_HORIZON)]
        horizon: usize,
        #[arg(long, default_value_t = openchain::stats::DEFAULT_BATCHES)]
        batches: usize,
        /// Lags for `fig5` (default 0..=30) and `lag-diagnostic` (default 1,2,5,10).
        #[arg(long, value_delimiter = ',')]
        lags: Option<Vec<u32>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FigureKind {
    Fig4,
    Fig5,
    LagDiagnostic,
}

impl FigureKind {
    fn name(self) -> &'static str {
        match self {
            Self::Fig4 => "fig4",
            Self::Fig5 => "fig5",
            Self::LagDiagnostic => "lag-diagnostic",
        }
    }
}

/// Runs a parsed command and returns what it prints on success.
pub fn execute(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Validate { config } => commands::validate(&config),
        Command::Analyze { config, out, lags, tol } => {
            let overrides = Overrides { seed: None, lags, tol, out };
            commands::analyze(&config, &overrides)
        }
        Command::Simulate { config, seed, out, lags, tol } => {
            let overrides = Overrides { seed, lags, tol, out };
            commands::simulate(&config, &overrides)
        }
        Command::Figure { which, out, seed, horizon, batches, lags } => {
            let lags = lags.unwrap_or_else(|| match which {
                FigureKind::Fig5 => (0..=FIG5_MAX_LAG).collect(),
                _ => config::DEFAULT_LAGS.to_vec(),
            });
            let settings = FigureSettings {
                figure: which.name().into(),
                seed,
                horizon,
                burn_in: openchain::simulate::default_burn_in(horizon),
                batches,
                lags,
            };
            let path = match which {
                FigureKind::Fig4 => commands::figure4(&settings, &out)?,
                FigureKind::Fig5 => commands::figure5(&settings, &out)?,
                FigureKind::LagDiagnostic => commands::lag_diagnostic(&settings, &out)?,
            };
            Ok(format!("wrote {}\n", path.display()))
        }
    }
}
