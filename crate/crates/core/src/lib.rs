//! Desk-scale condition-invariant semantic segmentation laboratory:
//! a tape-based tensor core, shallow cross-domain stylization, a synthetic
//! two-domain benchmark, a micro encoder/decoder segmentation network, the
//! feature-invariance loss family with self-training, and evaluation metrics.

pub mod cli;
pub mod config;
pub mod error;
pub mod fft;
pub mod image;
mod kernels;
pub mod metrics;
pub mod segnet;
pub mod stylize;
pub mod synthscenes;
pub mod tensor;
pub mod uda;

pub use error::{Error, Result};
