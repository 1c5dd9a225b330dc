//! Daily-bar stock trading pipeline built around an ensemble of k-nearest-neighbor
//! threshold classifiers.
//!
//! The crate is organized along the flow of data:
//!
//! - [`marketdata`]: bars, per-stock series, the CSV file format, chunk merging and
//!   the cross-stock trading calendar.
//! - [`ingestion`]: provider contracts, rate limiting and resumable retrieval.
//! - [`quality`]: short/missing file checks and calendar-gap exclusion.
//! - [`features`]: the seven engineered features, labels, datasets and scaling.
//! - [`knn`]: threshold classifiers, the ensemble, holdout and leave-one-out validation.
//! - [`tuning`]: grid search, particle swarm optimization, model selection,
//!   permutation importance, drift and the promotion gate.
//! - [`backtest`]: bracket-order fills on daily bars and the profit simulation.
//! - [`trader`]: the scheduled daily cycle against a broker, prediction logging and
//!   batch-duration tracking.

pub mod backtest;
pub mod clock;
pub mod features;
pub mod ingestion;
pub mod knn;
pub mod marketdata;
pub mod quality;
pub mod synthetic;
pub mod trader;
pub mod tuning;

mod par;

pub use features::{FeatureVector, NUM_FEATURES};
pub use marketdata::{Bar, Calendar, StockSeries, Universe};
