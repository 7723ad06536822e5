use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown substance {name:?}; nearest matches: {}", suggestions.join(", "))]
    UnknownSubstance {
        name: String,
        suggestions: Vec<String>,
    },

    #[error("invalid mixture target: {0}")]
    InvalidTarget(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: missing column {column:?}", path.display())]
    MissingColumn { path: PathBuf, column: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("split: {0}")]
    Split(String),

    #[error("insufficient length: {0}")]
    InsufficientLength(String),

    #[error("degenerate channel {channel}: {reason}")]
    DegenerateChannel { channel: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty spectrum: {0}")]
    EmptySpectrum(String),

    #[error("coverage: {0}")]
    Coverage(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("numeric failure at epoch {epoch}, step {step}: {message}")]
    Numeric {
        epoch: usize,
        step: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Error {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line runner: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Numeric { .. } => 4,
            Error::UnknownSubstance { .. }
            | Error::InvalidTarget(_)
            | Error::Parse { .. }
            | Error::MissingColumn { .. }
            | Error::Dataset(_)
            | Error::Split(_)
            | Error::InsufficientLength(_)
            | Error::DegenerateChannel { .. }
            | Error::EmptySpectrum(_)
            | Error::Coverage(_)
            | Error::Io { .. }
            | Error::Json(_) => 3,
            Error::Shape(_) | Error::InvalidArgument(_) => 1,
        }
    }
}
