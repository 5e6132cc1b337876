use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: isize, shape: Vec<usize> },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("mixing error: {0}")]
    Mixing(String),

    #[error("schedule step {step} outside [0, {total}]")]
    Schedule { step: usize, total: usize },

    #[error("unknown domain {0}")]
    UnknownDomain(usize),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite { epoch: usize, step: usize, detail: String },

    #[error("malformed image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("index {path}: {reason}")]
    Index { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Usage/configuration problems, as opposed to runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Geometry(_) | Error::UnknownDomain(_))
    }
}
