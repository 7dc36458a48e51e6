use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, UrclError>;

#[derive(Debug, Error)]
pub enum UrclError {
    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error in {file} at row {row}, column {column}: {message}")]
    Parse {
        file: String,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("checkpoint format error in {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl UrclError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        UrclError::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        UrclError::Config(msg.into())
    }
}
