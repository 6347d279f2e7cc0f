//! Online training, metric series, drop detection and component retraining.

mod config;
mod manifest;
mod metrics;
mod run;
mod transition;

pub use config::{CheckpointSchedule, TrainConfig};
pub use manifest::{artifact_version, CheckpointIndexEntry, RunManifest};
pub use metrics::{MetricRecord, MetricSeries, METRICS_HEADER};
pub use run::{component_retrain, reinitialize, train, TrainOutcome, Trainer};
pub use transition::{detect_transition, DropEvent, TransitionConfig, TransitionReport};

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}; last good checkpoint: {}", last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Diverged { step: u64, last_good: Option<PathBuf> },
    #[error("metric series is empty")]
    EmptySeries,
    #[error("metric series has {len} records, the detection window needs more than {window}")]
    SeriesTooShort { len: usize, window: usize },
    #[error("invalid metric series: {0}")]
    InvalidSeries(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}
