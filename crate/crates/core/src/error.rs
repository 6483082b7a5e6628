use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape { op: &'static str, expected: String, got: String },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("backward already called on this tape")]
    TapeConsumed,

    #[error("layer {layer} has no gradient; run backward before stepping")]
    MissingGradient { layer: usize },

    #[error("no fitted mixture model available: {0}")]
    NoMixture(String),

    #[error("non-finite training loss at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("{path}: line {line}, column {column}: {reason}")]
    Parse { path: String, line: usize, column: usize, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument { arg, reason: reason.into() }
    }

    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape { op, expected: expected.to_string(), got: got.to_string() }
    }
}
