//! Fairness-constrained policy learning for encouragement designs.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod nuisance;
pub mod optim;
pub mod policy;
pub mod redfair;
pub mod robust;
pub mod threshold;
pub mod util;

pub use error::{Error, Result};
