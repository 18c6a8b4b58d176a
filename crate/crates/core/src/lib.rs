//! Incomplete multi-view partial multi-label classification.
//!
//! Per-view masked autoencoders feed a label-driven contrastive objective, a
//! sample-level view quality discriminator produces fusion weights, and a
//! label-correlation-aware cross-entropy trains the classifier. The crate also
//! carries the incompleteness injection protocol and the six standard
//! multi-label metrics used to evaluate it.

pub mod checks;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nd;
pub mod trainer;

pub use error::{Error, Result};
pub use nd::{Matrix, RngStream, Tape, Var};
