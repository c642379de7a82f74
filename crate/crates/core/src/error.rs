//! Crate-wide error type.

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mode {mode} out of range for rank {rank}")]
    ModeOutOfRange { mode: usize, rank: usize },
    #[error("invalid permutation {0:?}")]
    InvalidPermutation(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("loss must be a scalar tensor attached to the tape")]
    NonScalarLoss,
    #[error("tensor is not attached to this tape")]
    DetachedTape,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("combinatorial size too large for exact attention: {0}")]
    ExactAttentionTooLarge(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
