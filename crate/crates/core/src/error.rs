use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("incompatible parameter maps: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    /// The OS error is part of the message rather than a chained source,
    /// so it is printed once.
    #[error("i/o error on {path}: {cause}")]
    Io {
        path: PathBuf,
        cause: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }

    /// True for failures caused by numerics rather than by inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Divergence(_))
    }
}

/// Failures specific to reading a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}, expected \"MSRG\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed header: {0}")]
    Header(String),

    #[error(
        "tensor {name}: shape {shape:?} needs {expected} bytes but header declares {declared}"
    )]
    Inconsistent {
        name: String,
        shape: Vec<usize>,
        expected: u64,
        declared: u64,
    },

    #[error("tensors {first} and {second} have overlapping byte ranges")]
    Overlap { first: String, second: String },

    #[error("truncated payload: tensor {name} ends at byte {end}, payload has {len}")]
    Truncated { name: String, end: u64, len: u64 },
}
