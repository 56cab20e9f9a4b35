//! Common error type for the crate.

use thiserror::Error;

/// Errors produced by simulation, calibration and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    /// A scalar argument was outside its documented range.
    #[error("parameter out of range: {0}")]
    Parameter(String),

    /// A configuration value or combination of values is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A required CSV column is missing from the header.
    #[error("{path}: missing column `{column}`")]
    CsvSchema { path: String, column: String },

    /// A CSV cell failed to parse.
    #[error("{path}:{line}: {message}")]
    CsvParse {
        path: String,
        line: usize,
        message: String,
    },

    /// An iterative solver failed to converge.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A quantity was requested outside the calibrated domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Not enough observations to compute an estimator.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// The blinding-factor estimator is undefined for the given efficiencies.
    #[error("undefined factor: {0}")]
    UndefinedFactor(String),

    /// An attack planner could not find a feasible plan.
    #[error("planning failure: {0}")]
    Planning(String),

    /// A linear system has no unique solution.
    #[error("singular system: {0}")]
    Singular(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
