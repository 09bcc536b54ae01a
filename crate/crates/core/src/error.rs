use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A line of an input file could not be split into the expected fields.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Well-formed input that violates a domain invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Training-only operation requested on a frozen encoder.
    #[error("encoder is frozen; {0} requires training mode")]
    Mode(&'static str),

    /// Checkpoint or artifact content does not match its recorded checksum or layout.
    #[error("integrity error in {path}: {message}")]
    Integrity { path: PathBuf, message: String },

    #[error("threshold calibration failed: {0}")]
    Calibration(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {diagnostic}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        diagnostic: String,
    },

    #[cfg(feature = "contextual")]
    #[error("contextual encoder: {0}")]
    Backend(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn integrity(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Integrity {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the content of input data files.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::Calibration(_)
                | Error::NonFiniteLoss { .. }
        )
    }

    pub fn is_integrity_error(&self) -> bool {
        matches!(self, Error::Integrity { .. })
    }
}
