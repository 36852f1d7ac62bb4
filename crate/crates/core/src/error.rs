use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick exit codes and HTTP statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Caller passed something invalid (bad parameter, mismatched shapes).
    Argument,
    /// Input data or files are missing, malformed or inconsistent.
    Data,
    /// A numerical computation diverged or produced non-finite values.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed IDX data at byte offset {offset}: {reason}")]
    Idx { offset: u64, reason: String },

    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("unknown label {0}")]
    UnknownLabel(u16),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {stage} (index {index})")]
    NonFinite { stage: String, index: usize },

    #[error("loss became NaN at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("unsupported model format version {found} (expected {expected})")]
    ModelVersion { found: u32, expected: u32 },

    #[error("artifact array `{name}`: {reason}")]
    ArtifactArray { name: String, reason: String },

    #[error("artifact manifest: {0}")]
    Manifest(String),

    #[error("no admissible epsilon in grid (every candidate exceeds the noise limit)")]
    NoAdmissibleEps,

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_)
            | Error::DimensionMismatch { .. }
            | Error::UnknownLabel(_)
            | Error::NoAdmissibleEps => ErrorKind::Argument,
            Error::NonFinite { .. } | Error::NanLoss { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}
