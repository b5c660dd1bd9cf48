//! Isoscape provenance models with Shapley-based data valuation.
//!
//! The crate fits forward (location to isotope ratios) Gaussian-process
//! isoscapes, inverts them into posterior maps over candidate origins,
//! offers random-forest models for both directions, values every training
//! sample with exact, truncated Monte Carlo and Beta Shapley estimators, and
//! runs value-guided data-selection experiments.

pub mod dataset;
pub mod error;
pub mod geo;
pub mod isoscape;

pub use error::{Error, Result};
pub mod forest;
pub mod selection;
pub mod valuation;

use serde::{Deserialize, Serialize};

/// Prediction direction: location to features, or features to location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}
