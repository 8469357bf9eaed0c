use thiserror::Error;

/// Every failure the library reports.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("directions {0} and {1} coincide")]
    DuplicateDirection(usize, usize),
    #[error("direction {index} has dimension {found}, expected {expected}")]
    BadDimension { index: usize, expected: usize, found: usize },
    #[error("invalid network: {0}")]
    BadNetwork(String),
    #[error("epsilon {0} outside the admissible range")]
    BadEpsilon(f64),
    #[error("rho {rho} must satisfy 0 < rho <= epsilon = {epsilon}")]
    BadRho { rho: f64, epsilon: f64 },
    #[error("control {control:?} not in A^(mode {mode}, branch {branch})")]
    InadmissibleControl { mode: usize, branch: usize, control: Vec<f64> },
    #[error("precondition failed: {0}")]
    MissingPrecondition(String),
    #[error("trajectory left the network on branch {branch:?} at t = {t}")]
    LeftNetwork { branch: Option<usize>, t: f64 },
    #[error("event bisection did not converge")]
    StalledEvent,
    #[error("jump rate {rate} exceeds the declared bound {bound}")]
    RateBoundViolated { rate: f64, bound: f64 },
    #[error("distance {distance} exceeds the admissible radius {radius}")]
    ScaleViolated { distance: f64, radius: f64 },
    #[error("input control is not admissible: {0}")]
    InadmissibleInput(String),
    #[error("assumption (C) does not hold: {0}")]
    AssumptionCViolated(String),
    #[error("no admissible discrete control at node {node}, mode {mode}")]
    NoAdmissibleControl { node: usize, mode: usize },
    #[error("time step too large: h * |lambda|_0 = {0} >= 1")]
    StepTooLarge(f64),
    #[error("mollifier stencil leaves the extended domain: {0}")]
    MarginViolated(String),
    #[error("scheme parameters differ: {0}")]
    SchemeMismatch(String),
    #[error("grid error: {0}")]
    Grid(String),
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("simplex exceeded {0} pivots")]
    IterationLimit(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
