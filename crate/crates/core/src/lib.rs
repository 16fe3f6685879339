//! Identify detrimental training samples as outliers in per-sample gradient
//! space, compare against influence-function baselines, and measure the effect
//! of trimming them on a retrained model.

// `!(x > 0.0)` is used on purpose so NaN parameters are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod harness;
pub mod influence;
pub mod model;
pub mod outlier;
pub mod par;

pub use error::{Error, Result};
