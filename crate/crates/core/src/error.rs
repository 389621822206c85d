use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while parsing SSPB tensors and containers.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0:#04x}")]
    UnsupportedVersion(u8),
    #[error("unsupported dtype byte {0:#04x}")]
    UnsupportedDtype(u8),
    #[error("truncated input: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("dims {dims:?} describe {expected} elements but data holds {found}")]
    ShapeMismatch {
        dims: Vec<u32>,
        expected: usize,
        found: usize,
    },
    #[error("malformed container: {0}")]
    Container(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("config error at line {line}: key `{key}`: {message}")]
    Config { line: usize, key: String, message: String },
    #[error("config error: {0}")]
    ConfigGeneral(String),
    #[error("missing input {}: {reason}", path.display())]
    MissingInput { path: PathBuf, reason: String },
    #[error("format error in {}: {source}", path.display())]
    FileFormat {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 2 = configuration error, 3 = missing or unreadable input,
    /// 4 = numeric failure, 1 = anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::ConfigGeneral(_) => 2,
            Error::MissingInput { .. } | Error::FileFormat { .. } | Error::Format(_) => 3,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
            Error::NonFinite(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
