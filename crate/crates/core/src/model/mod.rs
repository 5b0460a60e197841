//! Small classifiers with batch normalization, their initialization and
//! checkpoints.

mod batchnorm;
pub mod checkpoint;
mod init;
mod network;
mod spec;

pub use batchnorm::{
    batchnorm_forward, BatchNormState, BufferMode, FrozenStats, Phase, DEFAULT_EPS, DEFAULT_MOMENTUM,
};
pub use init::{build_model, InitScheme};
pub use network::{GradTargets, ModelState, Network, Recorded, StatsSource};
pub use spec::{architecture, LayerSpec, ModelSpec, ARCHITECTURES};
