//! Error type shared across the crate.
//!
//! Contract violations inside the numeric kernels (shape mismatches between
//! tensors the caller constructed) panic with a message naming both shapes;
//! everything that touches the outside world (files, manifests, checkpoints,
//! configuration) reports through [`Error`] so the CLI can exit cleanly with
//! a message naming the failing file, line, or dimension.

use std::fmt;
use std::io;
use std::path::PathBuf;

#[derive(Debug)]
pub enum Error {
    /// Malformed input data: wrong column count, bad token, bad file name.
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    /// A recording file name that encodes neither cohort marker, with no
    /// sidecar override to fall back on.
    Labeling { path: PathBuf, message: String },
    /// Invalid configuration value (probabilities, fractions, dimensions).
    InvalidConfig(String),
    /// Structurally invalid input to an operation (empty sequence, empty set).
    InvalidInput(String),
    /// Checkpoint file version does not match what this build writes.
    CheckpointVersion { found: u32, expected: u32 },
    /// Checkpoint tensor dimensions disagree with the config block or the
    /// file ended before all declared values were read.
    CheckpointDimensions(String),
    /// A checkpoint and a dataset disagree on feature dimensionality.
    DimensionMismatch { context: String },
    /// Training produced a non-finite loss.
    NonFiniteLoss { epoch: usize, batch: usize },
    Io { path: PathBuf, source: io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Parse {
                path,
                line,
                message,
            } => write!(f, "{}:{}: {}", path.display(), line, message),
            Error::Labeling { path, message } => {
                write!(f, "{}: {}", path.display(), message)
            }
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::CheckpointVersion { found, expected } => write!(
                f,
                "checkpoint format version {found} not supported (expected {expected})"
            ),
            Error::CheckpointDimensions(msg) => {
                write!(f, "checkpoint dimension inconsistency: {msg}")
            }
            Error::DimensionMismatch { context } => {
                write!(f, "dimension mismatch: {context}")
            }
            Error::NonFiniteLoss { epoch, batch } => write!(
                f,
                "non-finite loss at epoch {epoch}, batch {batch}; aborting"
            ),
            Error::Io { path, source } => write!(f, "{}: {}", path.display(), source),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
