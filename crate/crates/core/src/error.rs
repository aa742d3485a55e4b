use thiserror::Error;

/// Every failure the solvers report. Precondition violations are typed so
/// callers can tell a rejected step size from a numerical breakdown.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("time index {index} out of range 0..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("time {time} with step {dt} is not aligned with the backend's node grid")]
    Misaligned { time: f64, dt: f64 },

    #[error("regression normal equations singular at t = {time} (condition estimate {condition:e})")]
    SingularRegression { time: f64, condition: f64 },

    #[error("step size tau = {tau} violates tau < 1/C_L^2 with C_L = {lipschitz}")]
    StepTooLarge { tau: f64, lipschitz: f64 },

    #[error("step size tau = {tau} violates tau * sup|alpha_2|^2 < 1 with sup|alpha_2| = {alpha2_sup}")]
    DiffusionBound { tau: f64, alpha2_sup: f64 },

    #[error("invalid control problem: {0}")]
    InvalidProblem(String),

    #[error("fixed point for Z did not converge at step {step} after {} iterations", residuals.len())]
    FixedPointDiverged { step: usize, residuals: Vec<f64> },

    #[error(
        "conjugate residual stagnated after {iterations} iterations \
         (Rayleigh quotients in [{rayleigh_min:e}, {rayleigh_max:e}])"
    )]
    Stagnation {
        iterations: usize,
        residuals: Vec<f64>,
        rayleigh_min: f64,
        rayleigh_max: f64,
    },

    #[error("unknown reference case `{0}`")]
    UnknownCase(String),

    #[error("rate fit needs at least two points, got {0}")]
    InsufficientPoints(usize),

    #[error("rate fit needs strictly positive errors, got {0}")]
    NonPositiveError(f64),
}

pub type Result<T> = std::result::Result<T, Error>;
