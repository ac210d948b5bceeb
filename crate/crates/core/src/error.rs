use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZmpcError {
    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),

    #[error("non-finite state encountered during integration")]
    NonFiniteState,

    #[error("empty or invalid box: {0}")]
    EmptySet(String),

    #[error("modified target set is empty on dimension {dim} (lb {lb} > ub {ub}); risk factor too large for the zone width")]
    EmptyModifiedSet { dim: usize, lb: f64, ub: f64 },

    #[error("no control invariant set survives: {0}")]
    EmptyInvariantSet(String),

    #[error("closed-loop run aborted at step {step}: {failures} consecutive infeasible solves")]
    AbortedRun { step: usize, failures: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("malformed grid-set file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, ZmpcError>;

impl From<std::io::Error> for ZmpcError {
    fn from(e: std::io::Error) -> Self {
        ZmpcError::Io(e.to_string())
    }
}
