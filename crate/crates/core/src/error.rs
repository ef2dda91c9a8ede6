use thiserror::Error;

use crate::solver::SolveStatus;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("exact oracle limited to dimension <= 3, got {0}")]
    DimensionTooLarge(usize),

    #[error("set is empty (infeasible)")]
    Infeasible,

    #[error("problem is unbounded")]
    Unbounded,

    #[error("left-hand set of a containment query is empty")]
    EmptyInputSet,

    #[error("EV spec yields an empty flexibility set: {0}")]
    InfeasibleSpec(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed program: {0}")]
    Model(String),

    #[error("backend `{0}` cannot handle second-order cone terms")]
    BackendUnsupported(String),

    #[error("solver finished with status {0:?}")]
    Solver(SolveStatus),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("precondition violated: {0}")]
    PreconditionViolation(String),

    #[error("baseline optimum is zero but the approximate optimum is {0}")]
    DegenerateBaseline(f64),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors that come from a solver run rather than from bad input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(self, Error::Solver(_) | Error::Infeasible | Error::Unbounded | Error::Internal(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
