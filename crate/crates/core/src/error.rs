use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("validation error at layer {layer}: {msg}")]
    Validation { layer: usize, msg: String },
    #[error("shape error at layer {layer}: {msg}")]
    Shape { layer: usize, msg: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid command: {0}")]
    InvalidCommand(String),
    #[error("command space too large: ~{estimate:.3e} routes exceed the limit of {limit}")]
    CommandSpaceTooLarge { estimate: f64, limit: u64 },
    #[error("wrong regime: {0}")]
    WrongRegime(String),
    #[error("normalization error: {0}")]
    Normalization(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
