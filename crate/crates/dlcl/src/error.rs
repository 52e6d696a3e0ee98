use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("tensor does not belong to this graph")]
    GraphMismatch,

    #[error("tensor is not bound to a graph node")]
    Unbound,

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("non-finite value encountered at coordinate {coord}")]
    NonFinite { coord: usize },

    #[error("dense jacobian of {out_size}x{in_size} entries exceeds the guard of {guard}")]
    JacobianTooLarge {
        out_size: usize,
        in_size: usize,
        guard: usize,
    },

    #[error("factorization check guard exceeded: {0}")]
    GuardExceeded(String),

    #[error("loss batch contains no non-pad tokens")]
    EmptyLoss,

    #[error("gradient accumulation needs at least one micro-batch")]
    NoMicroBatches,

    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("checkpoint {path:?}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
