use thiserror::Error;

use crate::mcem::TraceRow;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A covariance specification that cannot produce a usable matrix.
    #[error("degenerate covariance specification: {0}")]
    Degenerate(String),

    #[error("Cholesky factorization failed for a {dim}x{dim} matrix (after jitter retry)")]
    Factorization { dim: usize },

    #[error("singular matrix in {context} (condition number estimate {condition:.3e})")]
    Singular { context: String, condition: f64 },

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("optimizer failed to converge: {0}")]
    Optimizer(String),

    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("fit aborted at iteration {iteration}: {source}")]
    FitAborted {
        iteration: usize,
        #[source]
        source: Box<Error>,
        trace: Vec<TraceRow>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Input errors map to exit code 2, numerical failures to 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain(_)
            | Error::Schema { .. }
            | Error::Dataset(_)
            | Error::Config(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 2,
            Error::Degenerate(_)
            | Error::Factorization { .. }
            | Error::Singular { .. }
            | Error::Sampler(_)
            | Error::Optimizer(_)
            | Error::FitAborted { .. } => 3,
        }
    }
}
