//! Interventions and analyses on trained encoders: attention recording and
//! head classification, ablation, weight switching, activation patching,
//! positional permutation, token replacement, linear probes and embedding
//! structure.

mod attention;
mod embedding;
mod groups;
mod intervene;
mod probe;

pub use attention::{
    classify_heads, read_attention_export, record_attention, summarize_records, write_attention_export,
    AttentionExport, AttentionSummary, HeadKind, HeadLabel, HeadStats, MaskMode, DEFAULT_OTHER_FACTOR,
};
pub use embedding::{embedding_report, embedding_series, EmbeddingReport, VALUE_GRID};
pub use groups::{derive_groups, group_ablation, published_groups, GroupAblationRow, HeadGroup};
pub use intervene::{
    apply_intervention, evaluate, evaluation_batch, negation_patch, permute_positions, random_permutation, switch_weights,
    token_intervention, InterventionOutcome, InterventionSpec, NegationPatchReport, TokenInterventionReport,
};
pub use probe::{
    fit_probe, fit_ridge, probe_dataset, ProbeConfig, ProbeDataset, ProbeResult, ProbeTarget, LayerProbe, RidgeModel,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;
use crate::nucnorm::NucNormError;

#[derive(Debug, Error)]
pub enum InterpError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("not a permutation of 0..{len}: {reason}")]
    InvalidPermutation { len: usize, reason: String },
    #[error("normal equations are singular at lambda = {lambda}; use a positive ridge penalty")]
    SingularProbe { lambda: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Linalg(#[from] NucNormError),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> InterpError + '_ {
    move |source| InterpError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Evaluation batches are split into chunks of this many samples.
pub(crate) const CHUNK: usize = 256;
