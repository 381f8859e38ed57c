use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not found: {0}")]
    NotFound(PathBuf),

    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    #[error("corrupt file {path}: {message}")]
    Corruption { path: PathBuf, message: String },

    #[error("{what} mismatch in {path}: file has {found}, manifest says {expected}")]
    Mismatch {
        path: PathBuf,
        what: &'static str,
        found: String,
        expected: String,
    },

    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("manifest at {path} has {} violation(s): {}", .violations.len(), .violations.join("; "))]
    InvalidManifest {
        path: PathBuf,
        violations: Vec<String>,
    },

    #[error("unknown token {token:?} in utterance {utterance}")]
    UnknownToken { token: String, utterance: String },

    #[error("empty inventory: {0}")]
    EmptyInventory(String),

    #[error("duplicate token {token:?} in {path} at lines {first_line} and {second_line}")]
    DuplicateToken {
        path: PathBuf,
        token: String,
        first_line: usize,
        second_line: usize,
    },

    #[error("no mapping for {token:?} in {map} map")]
    MissingMapping { token: String, map: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("divergence at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}
