use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated file: record {index} is incomplete")]
    Truncated { index: u64 },

    #[error("record {index}: {what} has length {found}, header declares {expected}")]
    LengthMismatch {
        index: u64,
        what: &'static str,
        found: usize,
        expected: usize,
    },

    #[error("record {index}: is_id={is_id} contradicts class {class_id} membership in the id set")]
    IdFlagMismatch { index: u64, class_id: i32, is_id: bool },

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("embedding {index} has zero norm")]
    ZeroNorm { index: usize },

    #[error("label {0} is not binary")]
    NonBinaryLabel(f64),

    #[error("no sample in the batch has a positive partner")]
    NoPositivePairs,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("group {0} has already been consumed")]
    GroupConsumed(usize),

    #[error("unknown record {0}")]
    UnknownRecord(usize),

    #[error("duplicate feedback for record {0}")]
    DuplicateFeedback(usize),

    #[error("no checkpoint in {0}")]
    NoCheckpoint(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Malformed {
            what,
            detail: detail.into(),
        }
    }
}
