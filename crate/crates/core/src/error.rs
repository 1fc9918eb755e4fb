use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("integration diverged at t = {time}")]
    IntegrationDiverged { time: f64 },

    #[error("no section crossing found within search horizon {horizon}")]
    NoCrossingFound { horizon: f64 },

    #[error("empty calibration sample")]
    EmptyCalibration,

    #[error("matrix not positive semidefinite: eigenvalue {eigenvalue:e} below -{tol:e}")]
    NotPositiveSemidefinite { eigenvalue: f64, tol: f64 },

    #[error("exponent condition violated: beta {beta} + gamma {gamma} must exceed 1")]
    ExponentCondition { beta: f64, gamma: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point {point:?} outside coefficient grid and extrapolation disabled")]
    OutsideGrid { point: Vec<f64> },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
