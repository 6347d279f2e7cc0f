//! BERT-style encoder: configuration, weights, forward pass, losses and
//! checkpoints.

mod checkpoint;
mod config;
mod forward;
mod loss;
mod weights;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, OptimizerManifest, OptimizerSnapshot, TensorEntry,
    CHECKPOINT_FORMAT,
};
pub use config::ModelConfig;
pub use forward::{
    build_graph, forward, ActivationPatch, ForwardOptions, ForwardOutput, ForwardRecord, Graph, HeadId, Interventions,
};
pub use loss::{evaluate_batch, mse_loss, LossBreakdown};
pub use weights::{init_model, parameter_shapes, Component, ModelWeights, INIT_STD};

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown component '{0}'")]
    UnknownComponent(String),
    #[error("missing tensor '{0}'")]
    MissingTensor(String),
    #[error("unexpected tensor '{0}'")]
    UnexpectedTensor(String),
    #[error("tensor '{name}' has shape {got:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tensor '{0}' contains non-finite values")]
    NonFinite(String),
    #[error("model configuration mismatch: expected {expected:?}, got {got:?}")]
    ConfigMismatch {
        expected: Box<ModelConfig>,
        got: Box<ModelConfig>,
    },
    #[error("input of {got} tokens is not a positive multiple of the sequence length {seq_len}")]
    SequenceLength { seq_len: usize, got: usize },
    #[error("token id {id} is outside the vocabulary")]
    UnknownToken { id: u32 },
    #[error("head ({layer},{head}) (zero-based) does not exist")]
    InvalidHead { layer: usize, head: usize },
    #[error("donor record does not match the input: {0}")]
    DonorShape(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
