use thiserror::Error;

/// Broad classes of failure, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    /// The inputs do not describe a valid model or experiment.
    Input,
    /// A numerical routine could not produce a trustworthy answer.
    Numeric,
    /// A verification or certification check failed.
    Verification,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("negative off-diagonal rate at ({0}, {1})")]
    NegativeRate(usize, usize),
    #[error("rate matrix has no positive off-diagonal entry")]
    EmptySupport,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("explicit step became unstable at t={t}: mass {mass}")]
    StepUnstable { t: f64, mass: f64 },
    #[error("exponent {exponent} exceeds cap {cap}")]
    Overflow { exponent: f64, cap: f64 },
    #[error("path uses transition ({0}, {1}) outside the support")]
    UnsupportedTransition(usize, usize),
    #[error("intensity and reference supports differ at ({0}, {1})")]
    SupportMismatch(usize, usize),
    #[error("rate {rate} at ({i}, {j}), t={t} is below the floor {floor}")]
    RateBelowFloor { i: usize, j: usize, t: f64, rate: f64, floor: f64 },
    #[error("effective sample size {ess} is too small")]
    DegenerateWeights { ess: f64 },
    #[error("no convergence after {} iterations: {detail}", gaps.len())]
    NotConverged { gaps: Vec<f64>, detail: String },
    #[error("band violation: nonzero rate at ({0}, {1})")]
    BandViolation(usize, usize),
    #[error("comparison hypothesis violated: {0}")]
    HypothesisViolated(String),
    #[error("certification failed: cost {cost} exceeds oracle minimum {oracle} + eps {eps}")]
    CertificationFailed { cost: f64, oracle: f64, eps: f64 },
    #[error("enumeration of {count} policies exceeds the guard {limit}")]
    TooLarge { count: f64, limit: usize },
    #[error("Isaacs condition fails on the grid: gap {gap}")]
    IsaacsViolated { gap: f64 },
    #[error("saddle inequality violated by {amount} ({detail})")]
    SaddleViolated { amount: f64, detail: String },
}

impl Error {
    pub fn family(&self) -> ErrorFamily {
        use Error::*;
        match self {
            NegativeRate(..)
            | EmptySupport
            | DimensionMismatch { .. }
            | InvalidInput(_)
            | SupportMismatch(..)
            | BandViolation(..)
            | TooLarge { .. }
            | UnsupportedTransition(..) => ErrorFamily::Input,
            StepUnstable { .. }
            | Overflow { .. }
            | RateBelowFloor { .. }
            | DegenerateWeights { .. }
            | NotConverged { .. } => ErrorFamily::Numeric,
            HypothesisViolated(_) | CertificationFailed { .. } | IsaacsViolated { .. } | SaddleViolated { .. } => {
                ErrorFamily::Verification
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
