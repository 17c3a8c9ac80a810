use thiserror::Error;

use crate::variations::AdmissibilityReport;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid transport plan: {0}")]
    InvalidPlan(String),

    #[error("marginal mismatch: {0}")]
    MarginalMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown builtin `{0}`")]
    UnknownBuiltin(String),

    #[error("transport solver did not converge after {pivots} pivots: {reason}")]
    SolverFailed { pivots: usize, reason: String },

    #[error("family is not admissible for q = {}", .0.q)]
    NotAdmissible(Box<AdmissibilityReport>),

    #[error("fixed-point iteration failed in window [{start}, {end}] after {iterations} iterations: {reason} (residuals: {residuals:?})")]
    NonContraction {
        start: f64,
        end: f64,
        iterations: usize,
        reason: String,
        residuals: Vec<f64>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
