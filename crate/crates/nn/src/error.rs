use thiserror::Error;

pub type Result<T, E = NnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("input of length {len} is shorter than required {needed}")]
    InputTooShort { len: usize, needed: usize },
    #[error("id {id} out of range for table of {size} rows")]
    IdOutOfRange { id: usize, size: usize },
    #[error("model dimension {dim} is not divisible by {heads} heads")]
    DimNotDivisible { dim: usize, heads: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("masked cross-entropy has no valid (non-padding) targets")]
    NoValidTargets,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
