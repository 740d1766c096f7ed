use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("model evaluation produced a non-finite value in {what} at t={t}")]
    ModelEvaluation { what: &'static str, t: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("flow diverged between t={from} and t={to}")]
    Divergence { from: f64, to: f64 },

    #[error("simulation diverged at step {step} of path {path}")]
    PathDivergence { path: usize, step: usize },

    #[error("matrix not positive definite (smallest eigenvalue {smallest_eigenvalue:e})")]
    Conditioning { smallest_eigenvalue: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate interval: s = t = {0}")]
    DegenerateInterval(f64),

    #[error("quadrature did not converge: refinement changed the value by {relative_change:e} (tolerance {tolerance:e})")]
    Accuracy { relative_change: f64, tolerance: f64 },

    #[error("grid too coarse: cell diameter {cell:e} exceeds {limit:e}")]
    Resolution { cell: f64, limit: f64 },

    #[error("finite-difference step too large: residual ratio under halving was {ratio:.3}")]
    StepSize { ratio: f64 },

    #[error("Neumann series diverges: estimated operator norm {norm:.4} >= 1")]
    DivergentSeries { norm: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
