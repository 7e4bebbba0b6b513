use std::path::PathBuf;

use thiserror::Error;

/// Error type shared across the crate.
///
/// Variants are grouped by failure class so callers (notably the CLI) can map
/// them onto distinct exit codes: contract/parameter problems, I/O and codec
/// problems, and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A value passed by the caller is outside its documented range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A model or run configuration violates its invariants.
    #[error("invalid config: {0}")]
    Config(String),

    /// An API contract was violated (e.g. backward on a non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity was produced; the step is aborted rather than
    /// letting the value propagate.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A dataset manifest could not be parsed or is inconsistent.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// A checkpoint file is malformed or does not match the model it is
    /// being loaded into.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Image decode/encode failure for a specific file.
    #[error("{path}: {message}")]
    Codec { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn codec(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Codec {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
