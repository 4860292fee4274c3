use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A dimension disagrees with what the operation requires.
    #[error("shape mismatch in {dim}: expected {expected}, found {found}")]
    ShapeMismatch {
        dim: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The requested algorithm cannot run this configuration. Callers pick
    /// another algorithm; nothing falls back silently.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("block geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("block index ({n}, {by}, {bx}) outside grid {gy}x{gx} with batch {batch}")]
    IndexOutOfGrid {
        n: usize,
        by: usize,
        bx: usize,
        gy: usize,
        gx: usize,
        batch: usize,
    },

    #[error("batch statistics are undefined for an empty block set")]
    EmptyBlocks,

    #[error("coverage violation: {0}")]
    Coverage(String),

    #[error("malformed {format} data at byte {offset}: {msg}")]
    Format {
        format: &'static str,
        offset: usize,
        msg: String,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(dim: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::ShapeMismatch {
            dim: dim.into(),
            expected,
            found,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}

/// Fail with a [`Error::ShapeMismatch`] unless `expected == found`.
pub(crate) fn ensure_dim(dim: &str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::shape(dim, expected, found))
    }
}
