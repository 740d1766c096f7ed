//! Frozen multi-scale Gaussian kernels, anisotropic quasi-metrics, singular
//! kernels, Green operators and Monte Carlo diagnostics for degenerate
//! Kolmogorov chain SDEs.

pub mod calderon;
pub mod config;
pub mod error;
pub mod field;
pub mod flow;
pub mod kernel;
pub mod metric;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod parametrix;
pub mod quadrature;
pub mod report;
pub mod runner;
mod spatial;
pub mod stats;

pub use error::{Error, Result};
