use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failures while decoding one of the binary formats.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated {
        offset: usize,
        needed: usize,
        len: usize,
    },
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("level indices not strictly increasing ({prev} then {next})")]
    LevelOrder { prev: u16, next: u16 },
    #[error("invalid header: {0}")]
    Header(String),
    #[error("non-finite value in tensor data")]
    NonFinite,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("hierarchy level {0} requested but not present in the stack")]
    MissingLevel(u16),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("internal consistency error: {0}")]
    Internal(String),
    #[error("one-class protocol violation: {0}")]
    Protocol(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("sample {index} ({id}): {source}")]
    Sample {
        index: usize,
        id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, source: ParseError) -> Self {
        Error::Parse {
            path: path.into(),
            source,
        }
    }

    /// Strips any `Sample` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Sample { source, .. } => source.root(),
            other => other,
        }
    }
}
