use thiserror::Error;

/// Errors raised by the geometric and dimension routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("geodesic left the chart at parameter {param}")]
    Escape { param: f64 },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("degenerate triangle: {0}")]
    Degenerate(String),

    #[error("cell {cell} rejected: {reason}")]
    Rejected { cell: String, reason: String },

    #[error("parameter inversion failed (residual {residual:e}, tolerance {tolerance:e})")]
    Inversion { residual: f64, tolerance: f64 },

    #[error("system too shallow: branch {branch} never crosses the threshold")]
    DepthExhausted { branch: String },

    #[error("atom budget {budget} exceeded ({atoms} atoms) with resampling disabled")]
    Capacity { atoms: usize, budget: usize },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("invalid gauge: {0}")]
    InvalidGauge(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
