//! `mandi`: ingest observations, impute, train, forecast, evaluate, run the
//! daily pipeline and serve the HTTP API.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::CliConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mandi", version, about = "Produce price direction forecasts with evidence")]
pub struct Cli {
    /// Flat key=value configuration file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Store directory.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Seed for every stochastic component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Log filter, e.g. `info` or `mandi_service=debug`.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClassifierArg {
    Forest,
    Logistic,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load the market registry and merge observations into the archive.
    Ingest {
        #[arg(long)]
        observations: PathBuf,
        #[arg(long)]
        markets: PathBuf,
    },
    /// Impute one produce's price panel; prints date,market_id,observed,imputed.
    Impute {
        #[arg(long)]
        produce: String,
        #[arg(long)]
        max_rank: Option<usize>,
        /// Last day of the window; defaults to the latest archived day.
        #[arg(long)]
        as_of: Option<NaiveDate>,
    },
    /// Sweep, fit and store a new model version for one market and horizon.
    Train {
        #[arg(long)]
        produce: String,
        #[arg(long)]
        market: String,
        #[arg(long)]
        q: usize,
        /// Hyperparameter grid file (max_rank, k, C, num_trees lists).
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        validation_dates: usize,
        #[arg(long)]
        as_of: Option<NaiveDate>,
    },
    /// Print forecasts as JSON on stdout and an evidence table on stderr.
    Forecast {
        #[arg(long)]
        produce: String,
        #[arg(long)]
        market: String,
        #[arg(long)]
        q: Option<usize>,
    },
    /// Walk-forward sweep over a grid; prints the score table as CSV.
    Evaluate {
        #[arg(long)]
        from: NaiveDate,
        #[arg(long)]
        to: NaiveDate,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        produce: String,
        /// Block size in days.
        #[arg(long, default_value_t = 1)]
        q: usize,
        /// Comma-separated target markets; defaults to all.
        #[arg(long, value_delimiter = ',')]
        markets: Vec<String>,
        #[arg(long, value_enum, default_value_t = ClassifierArg::Forest)]
        classifier: ClassifierArg,
        /// Impute once on all data (faster, approximate).
        #[arg(long)]
        frozen_imputation: bool,
    },
    /// Run acquire, clean, predict, archive, check and report for one day.
    DailyRun {
        /// Defaults to today in the configured timezone.
        #[arg(long)]
        date: Option<NaiveDate>,
        /// Directory of daily CSV files; overrides `data_dir`.
        #[arg(long)]
        source_dir: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
}

fn init_logging(filter: &str) {
    let filter =
        tracing_subscriber::EnvFilter::try_new(filter).unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn settings(cli: &Cli) -> Result<CliConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    if let Some(store) = &cli.store {
        config.store = store.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Failed(e.to_string()))?;
    }
    let config = settings(&cli)?;
    commands::dispatch(cli.command, &config)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging(&cli.log);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(error = %e, "command failed");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
