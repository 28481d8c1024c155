use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op} (overflow or invalid domain)")]
    NonFinite { op: &'static str },
    #[error("cannot L2-normalize row {row}: zero norm")]
    ZeroNorm { row: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate proposal weight (g = {weight}) for buffered sample at batch position {position}")]
    DegenerateProposal { position: usize, weight: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("prototype count mismatch: current model has {current}, frozen model has {frozen}")]
    PrototypeMismatch { current: usize, frozen: usize },
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("malformed input at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("non-finite loss at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
