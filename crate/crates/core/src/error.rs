use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid normalization stats for channel `{channel}`: {reason}")]
    InvalidStats { channel: String, reason: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("stability error: {0}")]
    Stability(String),

    #[error("numeric error in {location}: {reason}")]
    Numeric { location: String, reason: String },

    #[error("degenerate mask: no cells set")]
    DegenerateMask,

    #[error("fit error: {0}")]
    Fit(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn numeric(location: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    /// Stable process exit code for this error class.
    ///
    /// `1` is reserved for usage errors, which never reach this type.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidStats { .. } => 2,
            Error::Input(_)
            | Error::Format { .. }
            | Error::Shape(_)
            | Error::DegenerateMask
            | Error::Fit(_)
            | Error::UndefinedCorrelation(_)
            | Error::Io { .. } => 3,
            Error::Stability(_) | Error::Numeric { .. } => 4,
        }
    }
}
