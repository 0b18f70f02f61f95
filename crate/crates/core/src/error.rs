use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },

    #[error("subject leakage: {0}")]
    Leakage(String),

    #[error("training: {0}")]
    Training(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Failure while decoding a binary or text input, with the byte offset where it was detected.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("truncated input at byte {offset}: {what}")]
    Truncated { offset: usize, what: String },

    #[error("non-numeric header field {field} at byte {offset}: {text:?}")]
    NonNumeric {
        field: String,
        offset: usize,
        text: String,
    },

    #[error("record size mismatch at byte {offset}: {detail}")]
    RecordSize { offset: usize, detail: String },

    #[error("unsupported sample width at byte {offset}: {detail}")]
    UnsupportedWidth { offset: usize, detail: String },

    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported version {0}")]
    Version(u8),

    #[error("bad channel count at byte {offset}")]
    BadChannelCount { offset: usize },

    #[error("size mismatch at byte {offset}: {detail}")]
    SizeMismatch { offset: usize, detail: String },

    #[error("invalid value at byte {offset}: {detail}")]
    Invalid { offset: usize, detail: String },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Truncated { offset, .. }
            | ParseError::NonNumeric { offset, .. }
            | ParseError::RecordSize { offset, .. }
            | ParseError::UnsupportedWidth { offset, .. }
            | ParseError::BadChannelCount { offset }
            | ParseError::SizeMismatch { offset, .. }
            | ParseError::Invalid { offset, .. } => *offset,
            ParseError::BadMagic { .. } => 0,
            ParseError::Version(_) => 4,
        }
    }

    pub fn at(self, path: impl Into<PathBuf>) -> Error {
        Error::Parse {
            path: path.into(),
            source: self,
        }
    }
}
