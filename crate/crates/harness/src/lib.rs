//! Experiment harness for the `wmpg` crate: multi-seed training runs with
//! CSV, JSON and SVG outputs, single-axis ablations, and a resampling
//! benchmark of the without-replacement gradient estimators.

pub mod ablation;
pub mod bench;
pub mod error;
pub mod plot;
pub mod runner;
pub mod spec;
pub mod stats;

pub use error::{HarnessError, Result};
