//! Command-line front end: one subcommand per pipeline step, all artifacts under
//! the configured data directory.

use std::ffi::OsString;
use std::path::PathBuf;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
pub mod config;
mod layout;

pub use config::{Config, ConfigError};
pub use layout::Layout;

#[derive(Debug, Parser)]
#[command(name = "knntrade", version, about = "Daily-bar k-NN ensemble trading pipeline")]
pub struct Cli {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `data_dir` from the configuration.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Download historical chunks (offline synthetic source) under the rate limits.
    FetchHistorical(FetchArgs),
    /// Merge stored chunks into one file per stock.
    Merge,
    /// Check chunk and stock files, detect calendar gaps, report exclusions.
    Validate(ValidateArgs),
    /// Extract the feature dataset from the retained stocks.
    ExtractFeatures(RangeArgs),
    /// Train a candidate ensemble, one model per threshold.
    Train(TrainArgs),
    /// Search for the best k at one threshold.
    Tune(TuneArgs),
    /// Compare k-NN against baselines on identical holdout splits.
    SelectModel(SelectArgs),
    /// Permutation feature importance for one model of the ensemble.
    Importance(ImportanceArgs),
    /// Precision in a date window against random windows of equal length.
    Drift(DriftArgs),
    /// Profit simulation over a date range.
    Backtest(BacktestArgs),
    /// Replace the current ensemble with the candidate if it is strictly better.
    Promote(RangeArgs),
    /// Run one trading day.
    Run(RunArgs),
    /// Summarize the artifacts in the data directory.
    Report,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    #[arg(long, default_value_t = 20)]
    pub symbols: usize,
    /// Calendar days of synthetic history.
    #[arg(long, default_value_t = 120)]
    pub days: usize,
    #[arg(long, default_value = "2021-01-04")]
    pub start: NaiveDate,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Overrides `requests_per_day` for this run.
    #[arg(long)]
    pub budget: Option<u32>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Report only (the default).
    #[arg(long, conflicts_with = "delete")]
    pub dry_run: bool,
    /// Delete flagged short files.
    #[arg(long)]
    pub delete: bool,
}

#[derive(Debug, Args, Default)]
pub struct RangeArgs {
    #[arg(long)]
    pub from: Option<NaiveDate>,
    #[arg(long)]
    pub to: Option<NaiveDate>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub range: RangeArgs,
    /// Neighbor count; defaults to `k` from the configuration.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Method {
    Grid,
    Pso,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ValidatorArg {
    Loocv,
    Holdout,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long, default_value_t = 0.016)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = Method::Grid)]
    pub method: Method,
    #[arg(long, value_enum, default_value_t = ValidatorArg::Loocv)]
    pub validator: ValidatorArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub particles: usize,
    #[arg(long, default_value_t = 20)]
    pub iterations: usize,
    /// Cap on objective evaluations.
    #[arg(long)]
    pub max_evals: Option<usize>,
    /// Cap on wall-clock seconds.
    #[arg(long)]
    pub max_seconds: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long, default_value_t = 0.016)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0.25)]
    pub test_fraction: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum Which {
    Current,
    Candidate,
}

#[derive(Debug, Args)]
pub struct ImportanceArgs {
    #[arg(long, default_value_t = 0.016)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, value_enum, default_value_t = Which::Candidate)]
    pub model: Which,
}

#[derive(Debug, Args)]
pub struct DriftArgs {
    #[arg(long)]
    pub from: NaiveDate,
    #[arg(long)]
    pub to: NaiveDate,
    #[arg(long, default_value_t = 0.016)]
    pub threshold: f64,
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Which::Candidate)]
    pub model: Which,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    #[arg(long)]
    pub from: NaiveDate,
    #[arg(long)]
    pub to: NaiveDate,
    /// Ensemble to simulate; falls back to the candidate when none is promoted.
    #[arg(long, value_enum, default_value_t = Which::Current)]
    pub model: Which,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Trade against the simulated broker.
    #[arg(long)]
    pub paper: bool,
    /// Trading day to run.
    #[arg(long)]
    pub date: NaiveDate,
    #[arg(long)]
    pub log_mode: Option<String>,
}

/// Failure of a subcommand: usage errors exit 2, domain errors exit 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain { kind: &'static str, message: String },
}

impl CliError {
    pub fn domain(kind: &'static str, message: impl ToString) -> Self {
        CliError::Domain {
            kind,
            message: message.to_string(),
        }
    }
}

macro_rules! domain_from {
    ($($ty:ty => $name:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::domain($name, e)
            }
        })*
    };
}

domain_from! {
    knntrade_core::marketdata::MarketDataError => "MarketDataError",
    knntrade_core::ingestion::IngestionError => "IngestionError",
    knntrade_core::features::FeatureError => "FeatureError",
    knntrade_core::knn::KnnError => "KnnError",
    knntrade_core::tuning::TuningError => "TuningError",
    knntrade_core::backtest::BacktestError => "BacktestError",
    knntrade_core::trader::TraderError => "TraderError",
    ConfigError => "ConfigError",
    std::io::Error => "IoError",
}

fn load_config(cli: &Cli) -> Result<Config, CliError> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::domain("ConfigError", format!("{}: {e}", path.display())))?;
            Config::parse(&text)?
        }
        None => Config::default(),
    };
    if let Some(dir) = &cli.data_dir {
        config.data_dir = dir.clone();
    }
    Ok(config)
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn command_suite<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = load_config(&cli).and_then(|config| commands::dispatch(&cli.command, &config));
    match result {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `knntrade --help` for usage");
            2
        }
        Err(CliError::Domain { kind, message }) => {
            eprintln!("error: {kind}: {message}");
            1
        }
    }
}
