use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("duplicate sensor: candidate point {point} snaps to node {node} already in use")]
    DuplicateSensor { point: usize, node: usize },
    #[error("point ({x}, {y}) lies outside the unit square")]
    OutOfDomain { x: f64, y: f64 },
    #[error("index {index} out of range (len {len})")]
    Bounds { index: usize, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("value {value} outside the penalty domain [0, 1]")]
    Domain { value: f64 },
    #[error("newton iteration did not converge at time step {step} (residual {residual:e})")]
    NewtonNonconvergence { step: usize, residual: f64 },
    #[error("linear solver failure: {0}")]
    LinearSolver(String),
    #[error("line search stalled after {trials} trial steps")]
    LineSearchStalled {
        trials: usize,
        last_iterate: Vec<f64>,
    },
    #[error("bilevel adjoint solve stopped after {applications} operator applications (relative residual {residual:e})")]
    AdjointSolver { applications: usize, residual: f64 },
    #[error("{count} entries fall in the ambiguous band; exhaustive search is limited to {limit}")]
    TooAmbiguous { count: usize, limit: usize },
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("config validation error in `{field}`: {message}")]
    ConfigInvalid { field: String, message: String },
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for errors caused by bad input rather than numerical breakdown.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidDimension(_)
                | Error::DuplicateSensor { .. }
                | Error::OutOfDomain { .. }
                | Error::Bounds { .. }
                | Error::Shape(_)
                | Error::Parameter(_)
                | Error::Domain { .. }
                | Error::ConfigParse(_)
                | Error::ConfigInvalid { .. }
        )
    }
}
