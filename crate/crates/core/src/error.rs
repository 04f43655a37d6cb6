use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot parse expression `{input}`: {message}")]
    Parse { input: String, message: String },

    #[error("expression `{0}` contains unweighted template leaves")]
    Template(String),

    #[error("expression `{0}` is already instantiated")]
    AlreadyInstantiated(String),

    #[error("invalid expression: {0}")]
    InvalidExpr(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("task mixture is empty")]
    EmptyMixture,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("oracle cannot handle dictionary entry `{0}`")]
    UnsupportedDictionary(String),

    #[error("non-finite loss {loss} at step {step} (templates in batch: {templates})")]
    Divergence {
        step: usize,
        loss: f64,
        templates: String,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("batch container: {0}")]
    Container(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("nothing to aggregate: {0}")]
    EmptyReport(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
