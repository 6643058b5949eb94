use std::path::{Path, PathBuf};

use thiserror::Error;

/// CLI failures, each mapped to a distinct exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid value for `{key}`: {message}")]
    Validation { key: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Io { .. } => 3,
            CliError::Parse { .. } => 4,
            CliError::Validation { .. } => 5,
            CliError::Data(_) => 6,
            CliError::Numerical(_) => 7,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn invalid(key: impl Into<String>, message: impl std::fmt::Display) -> Self {
        CliError::Validation {
            key: key.into(),
            message: message.to_string(),
        }
    }

    /// Classifies a library error raised while working on `context`.
    pub fn from_core(context: &Path, e: dmubf::Error) -> Self {
        use dmubf::Error as E;
        match e {
            E::Io(source) => CliError::io(context, source),
            E::Hdf5(e) => CliError::Data(format!("{}: {e}", context.display())),
            E::MissingDataset(_)
            | E::MissingAntennas { .. }
            | E::ShapeMismatch { .. }
            | E::MalformedFile(_)
            | E::Csv(_) => CliError::Data(format!("{}: {e}", context.display())),
            E::Singular { .. }
            | E::ZeroChannel { .. }
            | E::ZeroPilots
            | E::ZeroReference(_)
            | E::NoSignal
            | E::NotPsd(_) => CliError::Numerical(e.to_string()),
            E::NegativeParameter(_)
            | E::OutsideApproximation(_)
            | E::InvalidConfig(_)
            | E::LengthMismatch { .. }
            | E::DimensionMismatch(_)
            | E::UnknownProfile(_)
            | E::BadPartition { .. }
            | E::UnsupportedSubcarriers(_)
            | E::OddBitCount(_)
            | E::Empty => CliError::invalid("config", e),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
