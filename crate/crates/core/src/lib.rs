//! Empirical neural tangent kernels along adversarial-training trajectories.
//!
//! The crate bundles a small reverse-mode autodiff engine, desk-scale
//! classifiers with batch normalization, l∞ attacks, the training loop with
//! its strategy variants, kernel assembly and metrics, numerical checks of
//! the kernel-shift and normalization-bound results, and the experiment
//! driver behind the `ntklab` binary.

pub mod attack;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod grad;
pub mod linalg;
pub mod model;
pub mod ntk;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
