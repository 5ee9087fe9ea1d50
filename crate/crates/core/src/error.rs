use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid distribution or model parameter, reported at construction time.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An argument lies outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A dependency model, copula or representation could not be built.
    #[error("construction failed: {0}")]
    Construction(String),

    #[error("quantile fit did not converge: {0}")]
    Fitting(String),

    #[error("constraint is infeasible: acceptance rate {rate:.3e} after {attempts} attempts")]
    Infeasible { rate: f64, attempts: u64 },

    /// Output covariance is (numerically) zero, so every index is undefined.
    #[error("degenerate output variance: trace {trace:.3e} below threshold {threshold:.3e}")]
    DegenerateVariance { trace: f64, threshold: f64 },

    #[error("model evaluation failed at row {row}: {message}")]
    Evaluation { row: usize, message: String },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    /// Internal invariant violated; indicates a bug.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
