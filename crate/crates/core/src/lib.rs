//! Training-time pruning of units and whole residual blocks with Bernoulli gates.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod complexity;
pub mod data;
pub mod error;
pub mod gates;
pub mod model;
pub mod numerics;
pub mod odelab;
pub mod trainer;

pub use error::{Error, Result};
