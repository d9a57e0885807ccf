use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Problems decoding one of the binary or text formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("non-finite value at entry {index}")]
    NonFinite { index: usize },
    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: String, found: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Utf8(#[from] std::string::FromUtf8Error),
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] contrastive_core::Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, source: impl Into<FormatError>) -> Self {
        Self::Format {
            path: path.into(),
            source: source.into(),
        }
    }

    /// 1 usage, 2 data or parse, 3 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_)
            | Self::Core(
                contrastive_core::Error::InvalidConfig(_) | contrastive_core::Error::Usage(_),
            ) => 1,
            Self::Verification(_) => 3,
            _ => 2,
        }
    }
}
