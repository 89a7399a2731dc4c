//! Experiment orchestration: configuration, training loops, grid search,
//! multi-seed suites and report emission.

mod config;
mod grid;
mod report;
mod suite;
mod svg;
mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{preset_strategies, DatasetConfig, ExperimentConfig, SelectionCriterion, TrainSettings};
pub use grid::{grid_cells, grid_search, inner_folds, GridCell, GridOutcome};
pub use report::{aggregate, format_mean_std, mean_std, Aggregate, METRIC_COLUMNS};
pub use suite::{evaluate_run, read_manifest, replot, run_suite, CellRecord, strategy_labels, CellStatus, RunEvaluation, SuiteManifest, SuiteReport};
pub use svg::reliability_svg;
pub use train::{select_model, train, EpochHistory, EpochRecord, TrainOutcome};

use crate::dataset::DataError;
use crate::losses::LossError;
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::uncertainty::UncertaintyError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty history: nothing to select")]
    EmptyHistory,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }
}
