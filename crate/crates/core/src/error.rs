use thiserror::Error;

/// Errors raised by the solver stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("field geometry does not match the operator geometry")]
    GeometryMismatch,

    #[error("axis {axis} is invalid for a {dim}-dimensional grid")]
    InvalidAxis { axis: usize, dim: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("symmetric eigensolver did not converge after {sweeps} sweeps")]
    EigenNoConvergence { sweeps: usize },

    #[error("pair (M, m) is not admissible: {0}")]
    Inadmissible(String),

    #[error("energy domain violation: {0}")]
    Domain(String),

    #[error("projection onto the dual cone failed (residual {residual:.3e})")]
    ProjectionFailed { residual: f64 },

    #[error("scalar proximal solve failed for argument {argument}")]
    ProxFailed { argument: f64 },

    #[error("linear solver did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    LinearSolver { iterations: usize, residual: f64 },

    #[error("active-set iteration did not settle after {iterations} iterations (complementarity {complementarity:.3e}, continuity {continuity:.3e})")]
    ActiveSetCycling {
        iterations: usize,
        complementarity: f64,
        continuity: f64,
    },

    #[error("box constraint is infeasible: {0}")]
    Infeasible(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{stage} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        stage: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("energy increased at step {step}: {before:.17e} -> {after:.17e}")]
    Dissipation { step: usize, before: f64, after: f64 },

    #[error("at PDFB iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
