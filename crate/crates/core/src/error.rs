use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("corrupt payload {}: {reason}", .path.display())]
    Corrupt { path: PathBuf, reason: String },
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: String, iteration: u64 },
    #[error("split impossible: {0}")]
    Split(String),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error("output directory {} is not empty (use --force to overwrite)", .0.display())]
    OutputExists(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-parsable category used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::InvalidSpec(_) => "spec",
            Error::MissingFile(_) => "missing-file",
            Error::Corrupt { .. } => "corrupt",
            Error::NonFinite { .. } => "non-finite",
            Error::Split(_) => "split",
            Error::Checkpoint(_) => "checkpoint",
            Error::OutputExists(_) => "output-exists",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

impl Error {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidSpec(_) | Error::Split(_) => 2,
            Error::MissingFile(_) | Error::OutputExists(_) => 3,
            Error::Shape(_) | Error::Corrupt { .. } | Error::Checkpoint(_) | Error::Json(_) => 4,
            Error::NonFinite { .. } => 5,
            Error::Io(_) => 6,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
