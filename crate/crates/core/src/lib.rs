//! Online clustering of hyperspectral push-broom lines with a cluster-level
//! classifier, a latency controller and a synthetic forest scene generator.

pub mod classifier;
pub mod cli;
pub mod control;
pub mod error;
pub mod eval;
pub mod hsdata;
pub mod ohslic;
pub mod synthgen;

pub use error::{Error, Result};
