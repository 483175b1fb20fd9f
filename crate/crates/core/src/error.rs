use thiserror::Error;

/// Errors raised by model construction, solvers and simulators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model: {0}")]
    Model(String),

    #[error("invalid constraint set: {0}")]
    Constraint(String),

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("exponent guard breached: |{exponent}| > {limit}")]
    ExponentGuard { exponent: f64, limit: f64 },

    #[error("nonlinear solve did not converge at time step {step} (residual {residual:e})")]
    NoConvergence { step: usize, residual: f64 },

    #[error("solution left the admissible box at time step {step}: |Y| = {value} > {bound}")]
    BoundViolation { step: usize, value: f64, bound: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("point ({t}, {x}) lies outside the solution grid")]
    OutOfGrid { t: f64, x: f64 },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
