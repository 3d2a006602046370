//! Error type shared across the core crate.

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("NaN produced in residual component {component}")]
    NanProduced { component: usize },
    #[error("cannot differentiate through min/max")]
    NonSmooth,
    #[error("derivative of sqrt at zero")]
    SqrtAtZero,
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("NaN input")]
    NanInput,
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("{0}")]
    Fit(String),
}

pub type Result<T> = core::result::Result<T, Error>;
