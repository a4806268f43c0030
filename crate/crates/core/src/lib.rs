//! Probabilistic contrastive learning on video clip features.
//!
//! Each clip becomes a diagonal Gaussian, a video becomes the uniform
//! mixture of its clip Gaussians, pairs are mined from Monte-Carlo
//! distances between videos, and training minimizes an uncertainty-weighted
//! contrastive objective with a KL regularizer.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod numerics;
pub mod heads;
pub mod distributions;
pub mod distances;
pub mod mining;
pub mod losses;
pub mod data_io;
pub mod trainer;
pub mod eval;
pub mod cli;

pub use error::{Error, Result};
