use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DanError>;

#[derive(Debug, Error)]
pub enum DanError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated data: {0}")]
    Truncated(String),

    #[error("manifest and tensor blob disagree: {0}")]
    Inconsistent(String),

    #[error("manifest parse error: {0}")]
    Manifest(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DanError {
    /// Stable numeric code per failure class, used by the CLI and bindings.
    pub fn code(&self) -> u8 {
        match self {
            DanError::Shape(_) => 10,
            DanError::InvalidArgument(_) => 11,
            DanError::EmptyDataset => 12,
            DanError::BadMagic { .. } => 20,
            DanError::VersionMismatch { .. } => 21,
            DanError::Truncated(_) => 22,
            DanError::Inconsistent(_) => 23,
            DanError::Manifest(_) => 24,
            DanError::Config(_) => 30,
            DanError::Io(_) => 40,
            DanError::Csv(_) => 41,
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(DanError::Shape(msg.into()))
}

/// Tags an I/O error with the path it concerns.
pub(crate) fn io_at(path: &std::path::Path) -> impl FnOnce(io::Error) -> DanError + '_ {
    move |e| DanError::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}
