//! Explainable multivariate time-series classification with convolutional
//! interval features and dual (variable + temporal) attention.
//!
//! The model extracts per-variable features over sliding intervals, weights
//! variables within each interval, weights intervals against each other, and
//! classifies the resulting summary embedding. The product of the two
//! attention weights is the per-instance explanation.

pub mod attention;
pub mod baselines;
pub mod conv;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
