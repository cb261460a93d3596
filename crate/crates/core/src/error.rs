use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("no self-teacher available before epoch {epoch}")]
    NoTeacher { epoch: u32 },

    #[error("checkpoint for epoch {epoch} already stored")]
    DuplicateEpoch { epoch: u32 },

    #[error("sampling exhausted after {attempts} attempts: {what}")]
    SamplingExhausted { attempts: u64, what: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: u32, batch: usize },

    #[error("malformed checkpoint data in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
