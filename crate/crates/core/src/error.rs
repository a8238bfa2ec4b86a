use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can report.
///
/// The variant names double as the `kind=` tag on the CLI's machine-readable
/// error line, see [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {field}: {message}")]
    Input { field: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numerical error in node `{node}`: {message}")]
    Numerical { node: String, message: String },

    #[error("format error in section `{section}`: {message}")]
    Format { section: String, message: String },

    #[error("checksum mismatch in section `{section}`")]
    Checksum { section: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Input {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn format(section: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            section: section.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short lowercase tag for this error's category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input { .. } => "input",
            Error::Data(_) => "data",
            Error::Usage(_) => "usage",
            Error::Numerical { .. } => "numerical",
            Error::Format { .. } => "format",
            Error::Checksum { .. } => "checksum",
            Error::Internal(_) => "internal",
            Error::Io { .. } => "io",
        }
    }
}
