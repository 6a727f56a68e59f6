//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("column `{0}` missing from header")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: {detail}")]
    MalformedCell {
        row: usize,
        column: String,
        detail: String,
    },
    #[error("row {row}: {detail}")]
    PatternViolation { row: usize, detail: String },
    #[error("empty source: {0}")]
    EmptySource(String),
    #[error("{0}")]
    Validation(String),

    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),
    #[error("separation detected while fitting the propensity model: {0}")]
    Separation(String),
    #[error("no convergence after {iterations} iterations, best residual {residual:.3e}")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        /// Best iterate observed before giving up.
        best: Vec<f64>,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("jacobian numerically singular (condition estimate {0:.3e})")]
    SingularJacobian(f64),

    #[error("bread matrix not invertible: {0}")]
    SingularBread(String),
    #[error("{failed} of {total} bootstrap replicates failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error("result layouts do not match: {0}")]
    LayoutMismatch(String),

    #[error("quadrature unsupported: {0}")]
    QuadratureUnsupported(String),
    #[error("conditional second-moment estimate degenerate ({0:.3e})")]
    DegenerateVariance(f64),
    #[error("basis Gram matrix ill conditioned (condition estimate {0:.3e})")]
    IllConditionedGram(f64),
}

pub type Result<T> = std::result::Result<T, Error>;
