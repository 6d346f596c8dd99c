use thiserror::Error;

use crate::model::Regime;

/// Errors raised by the library. Every variant describes bad input or a
/// numerical routine that gave up; none of them are recoverable internally.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{field} = {value} is out of range (expected {expected})")]
    OutOfRange {
        field: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("threshold {0} has no stationary distribution in the oscillating regime")]
    NoStationary(u64),

    #[error("operation requires the {0:?} regime")]
    WrongRegime(Regime),

    #[error("oscillating regime requires a volatile source, (N-1)r >= 4p")]
    VolatilityRequired,

    #[error("no root: {0}")]
    NoRoot(&'static str),

    #[error("{what} did not converge within {iterations} iterations")]
    NonConvergence { what: &'static str, iterations: usize },

    #[error("confidence radius requested with zero observations")]
    DivisionByZero,

    #[error("need at least {need} checkpoints spanning two decades, got {got}")]
    InsufficientCheckpoints { got: usize, need: usize },

    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },

    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
