//! Desk-scale benchmark harness for warm-start plasticity experiments.
//!
//! The crate bundles a small reverse-mode training engine, builders for three
//! architectures with layer-group reset, four first-order optimizers,
//! non-stationary data schedules (warm-start subsets, staged splits, smooth
//! blending), gradient-noise and sharpness probes, and an experiment runner
//! that reports the warm-vs-fresh generalisation gap.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod kernels;
pub mod models;
pub mod optim;
pub mod probes;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
