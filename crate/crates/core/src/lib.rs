//! Parameter estimation with a transformer: synthetic tasks, sample
//! normalization, grid encoding, the network and its training loop,
//! closed-form baselines and paired evaluation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod checkpoint;
pub mod distributions;
pub mod encode;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod normalize;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
