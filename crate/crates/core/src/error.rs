use thiserror::Error;

use crate::types::TraceRecord;

/// Errors raised by the estimation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("model domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("cluster {cluster}: {source}")]
    Cluster {
        cluster: String,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate fit: {0}")]
    Degenerate(String),

    #[error("starting values could not be obtained (quantile regression: {nlrq}; least squares: {nls})")]
    Start { nlrq: Box<Error>, nls: Box<Error> },

    #[error("fit failed: {message}")]
    Fit {
        message: String,
        trace: Vec<TraceRecord>,
    },

    #[error("bootstrap failed: {failures} of {requested} replicates failed")]
    Bootstrap {
        failures: usize,
        requested: usize,
        /// `replicate k: reason` for every failed replicate.
        reasons: Vec<String>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn in_cluster(self, id: &str) -> Error {
        Error::Cluster {
            cluster: id.to_string(),
            source: Box::new(self),
        }
    }
}
