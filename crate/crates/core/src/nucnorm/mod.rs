//! Nuclear-norm minimization baseline for matrix completion.

mod compare;
mod solve;
mod svd;

pub use compare::{compare_bert_vs_nucnorm, ComparisonReport, ComparisonRow, COMPARISON_HEADER};
pub use solve::{nuclear_norm, solve, solve_constrained, solve_regularized, Mode, NucNormProblem, NucNormSolution};
pub use svd::{svd, svt, Svd};

use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum NucNormError {
    #[error("matrix contains non-finite values")]
    NonFinite,
    #[error("SVD did not converge after {sweeps} sweeps")]
    SvdNotConverged { sweeps: usize },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}
