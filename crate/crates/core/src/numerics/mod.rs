//! Dense linear algebra, seeded randomness and small statistics helpers.
//!
//! Everything here is deterministic: reductions run in a fixed order and all
//! randomness flows through an explicit [`RngState`].

mod linalg;
mod matrix;
mod rng;
mod stats;

pub use linalg::{ridge_pinv, Cholesky, MAX_CONDITION};
pub use matrix::Matrix;
pub use rng::{gaussian, RngState};
pub use stats::{
    cosine_dissimilarity, cosine_similarity, dot, log_softmax, mean, median, norm, pearson,
    softmax,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("expected length {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("matrix is ill-conditioned (estimate {estimate:e})")]
    IllConditioned { estimate: f64 },
    #[error("correlation undefined: zero variance input")]
    ZeroVariance,
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("{0}")]
    InvalidArgument(String),
}
