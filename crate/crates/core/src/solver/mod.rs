//! Robust nonlinear least squares: residual blocks over pose and vector
//! parameters, Cauchy losses, Levenberg–Marquardt and trimmed optimisation.

mod lm;
mod loss;
mod numeric;
mod problem;
mod trimmed;

pub use lm::{solve_lm, IterationRecord, LevenbergMarquardt, LmOptions, SolverSummary, Termination};
pub use loss::{cauchy, LossKind, RobustLoss};
pub use numeric::{analytic_jacobians, finite_difference_jacobians, max_relative_difference};
pub use problem::{
    CostFunction, Manifold, ParamId, Parameter, ParameterBlock, Problem, ResidualBlock, ResidualId,
    ResidualTag,
};
pub use trimmed::{largest_residuals, solve_trimmed, TrimConfig, TrimmedSummary};

use thiserror::Error;

use crate::geometry::GeometryError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("problem has no residual blocks left")]
    EmptyProblem,
    #[error("invalid residual block: {0}")]
    InvalidBlock(String),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}
