//! Threshold scheduling of status updates for a symmetric Markov source
//! under the mean age of incorrect information (MAoII).
//!
//! * [`model`]: parameters, belief sequence and the age ladder `a_j`.
//! * [`steady`]: stationary distribution and long-run averages of a threshold.
//! * [`solver`]: optimal threshold for known parameters, with oracles.
//! * [`sim`]: slot-level simulation of source, channel and monitor.
//! * [`learning`]: the phased learner for unknown `r` and a greedy baseline.
//! * [`regret`]: Monte Carlo regret curves and log-vs-linear fits.

pub mod error;
pub mod learning;
pub mod model;
pub mod regret;
pub mod sim;
pub mod solver;
pub mod steady;

pub use error::{Error, Result};
pub use model::{AgeTable, Regime, SourceParams};
pub use steady::ThresholdPolicy;
