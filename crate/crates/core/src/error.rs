use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every extent must be positive")]
    InvalidShape(Vec<usize>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for {len} entries")]
    Index { index: usize, len: usize },

    #[error("non-finite function value at perturbed index {index}")]
    NonFinite { index: usize },

    #[error("degenerate dataset: {0}")]
    Dataset(String),

    #[error("training diverged at epoch {epoch} (learning rate {lr})")]
    Divergence { epoch: usize, lr: f64 },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid model: {0}")]
    ModelInvalid(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("config error on line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
