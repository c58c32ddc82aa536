use std::path::PathBuf;

use thiserror::Error;

/// Failure modes of the tensor container codec. Each kind maps to a distinct
/// error code so callers can tell corruption apart from truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic,
    UnsupportedVersion,
    UnknownDtype,
    Truncated,
    CrcMismatch,
    DtypeMismatch,
    Malformed,
}

impl FormatErrorKind {
    pub fn code(self) -> u8 {
        match self {
            FormatErrorKind::BadMagic => 10,
            FormatErrorKind::UnsupportedVersion => 11,
            FormatErrorKind::UnknownDtype => 12,
            FormatErrorKind::Truncated => 13,
            FormatErrorKind::CrcMismatch => 14,
            FormatErrorKind::DtypeMismatch => 15,
            FormatErrorKind::Malformed => 16,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-deterministic computation: {0}")]
    NonDeterministic(String),

    #[error("non-finite loss at step {step} (tasks in batch: {tasks:?})")]
    NonFiniteLoss { step: u64, tasks: Vec<String> },

    #[error("constraint could not be satisfied: {0}")]
    Constraint(String),

    #[error("format error ({kind:?}) in {context}: {message}")]
    Format {
        kind: FormatErrorKind,
        context: String,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(kind: FormatErrorKind, context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            kind,
            context: context.into(),
            message: message.into(),
        }
    }

    /// True for errors that originate in file access or decoding rather than
    /// in validation of values.
    pub fn is_io_or_format(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Format { .. } | Error::Json { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
