use thiserror::Error;

/// Coarse failure class, used by the CLI to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    BadInput,
    Numeric,
    Format,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("not differentiable: {0}")]
    NotDifferentiable(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite(_) | Error::Diverged { .. } => ErrorKind::Numeric,
            Error::Format(_) | Error::Json(_) => ErrorKind::Format,
            _ => ErrorKind::BadInput,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
