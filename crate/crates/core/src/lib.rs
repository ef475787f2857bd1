//! Policy gradients estimated from a few distinct actions per state, each
//! evaluated by rolling a learned world model forward.
//!
//! The crate bundles a small dense network library, sampling without
//! replacement with inclusion probabilities, the gradient estimators, the
//! world model, the training agents and two native environments.
// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod env;
pub mod error;
pub mod estimator;
pub mod nn;
pub mod swor;
pub mod world_model;

pub use error::{Error, Result};
