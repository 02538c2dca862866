use thiserror::Error;

use crate::expr::ExprError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error(transparent)]
    Expr(#[from] ExprError),

    #[error("non-finite value {value} at ({x}, {y})")]
    NonFinite { x: f64, y: f64, value: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("point ({x}, {y}) is outside the mesh")]
    Location { x: f64, y: f64 },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("singular flux on triangle {triangle}: zero gradient with eps = 0 and p < 2")]
    Singular { triangle: usize },

    #[error("matrix is not SPD: pivot {pivot} has value {value}")]
    NotSpd { pivot: usize, value: f64 },

    #[error("{what} did not converge after {iterations} iterations (last residual {residual:e})")]
    NoConvergence { what: String, iterations: usize, residual: f64 },

    #[error(transparent)]
    Newton(#[from] Box<NewtonFailure>),

    #[error("at eps = {eps:e}: {source}")]
    AtEps { eps: f64, source: Box<Error> },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

/// Newton and the Kačanov fallback both failed. Carries the best iterate seen.
#[derive(Debug, Clone, Error)]
#[error("regularized solve did not converge after {iterations} iterations (best residual {best_residual:e})")]
pub struct NewtonFailure {
    pub iterations: usize,
    pub best_residual: f64,
    pub best_coeffs: Vec<f64>,
    pub residual_history: Vec<f64>,
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
