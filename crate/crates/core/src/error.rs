use thiserror::Error;

/// Errors produced by the solver, the oracles and the experiment drivers.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent or invalid problem/scenario configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A scalar argument outside its admissible domain (e.g. a non-positive noise level).
    #[error("domain error: {0}")]
    Domain(String),

    /// State propagation produced a non-finite value.
    #[error("propagation error on trajectory {trajectory}: {reason}")]
    Propagation { trajectory: u64, reason: String },

    /// Every particle received zero likelihood.
    #[error("particle degeneracy at observation {obs_index}: {reason}")]
    Degeneracy { obs_index: usize, reason: String },

    /// Singular or ill-posed linear algebra.
    #[error("linear algebra error: {0}")]
    LinearAlgebra(String),

    /// Regression failed for a specific time node.
    #[error("fit error at node {node}: {reason}")]
    Fit { node: usize, reason: String },

    /// A policy could not be evaluated.
    #[error("policy error: {0}")]
    Policy(String),

    /// Explicit Euler step for a finite chain left the probability simplex.
    #[error("step-size error: {0}")]
    StepSize(String),

    /// Exhaustive enumeration would exceed its work budget.
    #[error("size error: {0}")]
    Size(String),

    /// One or more Monte Carlo rollouts failed.
    #[error("{count} rollout(s) failed; first on trajectory {first_trajectory}: {first_reason}")]
    Rollouts { count: usize, first_trajectory: u64, first_reason: String },

    /// A hard invariant check failed.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("parse error in {location}: {reason}")]
    Parse { location: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Domain(_) => 1,
            Error::Invariant(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
