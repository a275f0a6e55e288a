use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape contract violated: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("target exposure {target} outside achievable range ({min}, {max})")]
    Range { target: f64, min: f64, max: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite loss at step {step}: {components}")]
    NonFiniteLoss { step: u64, components: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("codec error in {path}: {msg}")]
    Codec { path: PathBuf, msg: String },

    #[error("ingestion error in {path}: {msg}")]
    Ingest { path: PathBuf, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable class name, used by the CLI for exit codes.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Range { .. } => "range",
            Error::Numerical(_) | Error::NonFiniteLoss { .. } => "numerical",
            Error::CorruptCheckpoint(_) => "checkpoint",
            Error::Codec { .. } => "codec",
            Error::Ingest { .. } => "ingest",
            Error::Io(_) => "io",
            Error::Json(_) => "config",
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
