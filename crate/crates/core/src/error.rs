use thiserror::Error;

/// Errors raised by the solvers. Numeric payloads are widened to `f64`.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("control weight k(t) = {value} is not positive at t = {t}")]
    NonPositiveControlWeight { t: f64, value: f64 },

    #[error("diffusion vanishes at t = {t}; the equation is not uniformly parabolic")]
    DegenerateDiffusion { t: f64 },

    #[error("Riccati solution exceeded the blow-up cap {cap} at t = {t} (|P| = {value})")]
    RiccatiBlowUp { t: f64, value: f64, cap: f64 },

    #[error("Riccati solution went negative ({value}) at t = {t}")]
    NegativeRiccati { t: f64, value: f64 },

    #[error("non-finite value produced at time step {step}")]
    NonFinite { step: usize },

    #[error("fixed-point iteration did not converge at time step {step} (last correction {correction})")]
    FixedPointDiverged { step: usize, correction: f64 },

    #[error("point (t = {t}, x = {x}) lies outside the grid")]
    OutsideGrid { t: f64, x: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bundles are not coupled: {0}")]
    Uncoupled(String),

    #[error("control rule violates linear growth near x = {x} (|u|/(1+|x|) = {ratio})")]
    ControlGrowth { x: f64, ratio: f64 },

    #[error("regression failed: {0}")]
    Regression(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
