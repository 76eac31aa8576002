use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FedError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid probability distribution: {0}")]
    Distribution(String),

    #[error("empty dataset")]
    EmptyData,

    #[error("invalid label {label} (class count {classes})")]
    Label { label: usize, classes: usize },

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("infeasible partition: {0}")]
    Partition(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("device {device} cannot participate: round budget {tau} does not exceed delay {delay}")]
    Timeout { device: usize, tau: f64, delay: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed binary data: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FedError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedError::Io {
            path: path.into(),
            source,
        }
    }
}
