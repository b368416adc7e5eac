use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: line {line}: {message}")]
    Data {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    Usage(String),

    #[error(transparent)]
    Fit(#[from] nlqmm::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Process exit status for a successful run.
pub const EXIT_OK: i32 = 0;
/// Bad input: arguments, config, data or I/O.
pub const EXIT_INPUT: i32 = 1;
/// A fit failed numerically or did not converge.
pub const EXIT_NUMERICAL: i32 = 2;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Fit(e) => match e {
                nlqmm::Error::InvalidParameter(_) | nlqmm::Error::Dimension(_) | nlqmm::Error::InvalidData(_) => {
                    EXIT_INPUT
                }
                _ => EXIT_NUMERICAL,
            },
            _ => EXIT_INPUT,
        }
    }
}
