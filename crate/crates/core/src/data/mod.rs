//! Low-rank matrix sampling, masking and tokenization.

mod instance;
mod sample;
mod tokenizer;

pub use instance::{sample_batch, Batch, DataConfig, InstanceJson, MaskedInstance};
pub use sample::{
    sample_mask, sample_matrix, stream_rng, structured_mask, EntryDistribution, GroundTruthMatrix, Mask,
    MatrixFamily,
};
pub use tokenizer::{round2, Tokenizer, MASK_TOKEN};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("value {value} is outside the tokenizer range [-10, 10]")]
    OutOfRange { value: f64 },
    #[error("unknown token id {id}")]
    UnknownToken { id: u32 },
    #[error("rank {rank} is invalid for a {n}x{n} matrix")]
    InvalidRank { n: usize, rank: usize },
    #[error("masking probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error("invalid structured mask: {0}")]
    StructuredMask(String),
    #[error("size mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("inconsistent instance: {0}")]
    Inconsistent(String),
}
