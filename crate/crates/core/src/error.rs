use nalgebra::DVector;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, GridError>;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid case: {0}")]
    Validation(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("line {0} is not in service")]
    InactiveLine(usize),
    #[error("equilibrium solve diverged after {iterations} iterations (residual {residual:.3e})")]
    Diverged {
        iterations: usize,
        residual: f64,
        best: Box<DVector<f64>>,
    },
    #[error("critical point is a saddle (minimum Hessian eigenvalue {min_eigenvalue:.3e})")]
    Saddle {
        min_eigenvalue: f64,
        x: Box<DVector<f64>>,
    },
    #[error("equilibrium repair failed: {0}")]
    Unrecoverable(String),
    #[error("no reachable point on the failure surface of line {0}")]
    Infeasible(usize),
    #[error("curvature matrix is singular")]
    SingularCurvature,
    #[error("no exit before the horizon ({elapsed:.3e} s elapsed)")]
    Timeout { elapsed: f64 },
    #[error("state became non-finite at step {step}")]
    Blowup { step: u64 },
    #[error("fluctuation path did not reach the equilibrium after {steps} steps (distance {distance:.3e})")]
    PathDiverged { steps: usize, distance: f64 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("csv row {row}: {message}")]
    Csv { row: usize, message: String },
    #[error("catalog mismatch: {0}")]
    Catalog(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
