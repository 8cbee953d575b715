use thiserror::Error;

/// Errors surfaced by every module of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in layer {layer}: {msg}")]
    Numeric { layer: usize, msg: String },

    #[error("training diverged at batch {batch}: {msg}")]
    Training { batch: usize, msg: String },

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("size bound exceeded: {0}")]
    Size(String),

    #[error("certification failed: {0}")]
    Certification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
