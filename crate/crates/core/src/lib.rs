//! Unsupervised binary hashing with the bi-half quantization layer.
//!
//! The crate trains small encoders whose continuous outputs are binarized
//! per minibatch so that every bit splits the batch in half, and evaluates
//! the resulting codes with a bit-packed Hamming retrieval engine.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod codes;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod quantizers;

pub use error::{Error, Result};
pub use numerics::{Matrix, RngStream};
pub mod training;
pub mod cli;
