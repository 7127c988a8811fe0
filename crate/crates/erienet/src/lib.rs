//! ERIENet: efficient low-light RAW image enhancement.
//!
//! End-to-end toolkit: Bayer RGGB packing, a three-branch multi-scale
//! network with channel-aware residual dense blocks and green-channel
//! guided normalization, Haar-wavelet training losses, a toy-scale Adam
//! trainer, and complexity/throughput accounting. Everything runs on CPU
//! with a built-in reverse-mode autodiff engine.

pub mod bayer;
pub mod check;
pub mod error;
pub mod loss;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
