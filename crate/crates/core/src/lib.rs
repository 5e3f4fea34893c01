//! Weakly supervised discriminative feature learning on state-distorted
//! data: surrogate-class pseudo-labeling with decision boundary
//! rectification and feature drift regularization.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod fsutil;
pub mod kmeans;
pub mod math;
pub mod model;
pub mod optim;
pub mod synth;
pub mod trainer;
pub mod wdbr;
pub mod wfdr;

pub use error::{Error, Result};
