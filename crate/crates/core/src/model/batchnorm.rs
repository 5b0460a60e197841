//! Batch-norm running buffers and the two evaluation modes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NormStats, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

/// How batch-norm layers normalize outside of training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferMode {
    /// Running (unbiased) estimates of mean and variance.
    #[default]
    WithBuffer,
    /// Statistics of whatever batch is being evaluated; buffers are ignored.
    WithoutBuffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer. The affine `gamma`/`beta`
/// live in the parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Folds one training batch into the buffers. `var` is the biased batch
    /// variance over `count` values per channel; the buffer receives the
    /// unbiased `count / (count - 1)` estimate.
    pub fn update(&mut self, mean: &[f64], var: &[f64], count: usize) -> Result<()> {
        if count < 2 {
            return Err(Error::DegenerateVariance {
                layer: 0,
                detail: "unbiased variance needs at least two values per channel".into(),
            });
        }
        let correction = count as f64 / (count - 1) as f64;
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * var[c] * correction;
        }
        Ok(())
    }
}

/// Per-layer normalization statistics frozen for kernel evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenStats {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Standalone batch-norm layer on `[N, C]` or `[N, C, H, W]` input.
///
/// `Train` normalizes with batch statistics and, in `WithBuffer` mode, folds
/// them into `state`. `Eval` normalizes with the buffers (`WithBuffer`) or
/// with the statistics of `x` itself (`WithoutBuffer`).
pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    state: &mut BatchNormState,
    mode: BufferMode,
    phase: Phase,
) -> Result<Tensor> {
    if x.ndim() < 2 || x.shape()[1] != state.channels() {
        return Err(Error::shape(
            "batchnorm",
            format!("{} channels expected, input {:?}", state.channels(), x.shape()),
        ));
    }
    let c = state.channels();
    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone(), false);
    let g = tape.leaf(Tensor::new(vec![c], gamma.to_vec())?, false);
    let b = tape.leaf(Tensor::new(vec![c], beta.to_vec())?, false);
    let use_buffers = phase == Phase::Eval && mode == BufferMode::WithBuffer;
    if phase == Phase::Eval && mode == BufferMode::WithoutBuffer && x.batch() < 2 {
        return Err(Error::DegenerateVariance {
            layer: 0,
            detail: "evaluation without buffers needs a batch of at least two".into(),
        });
    }
    let stats = if use_buffers {
        NormStats::Fixed {
            mean: &state.running_mean,
            var: &state.running_var,
        }
    } else {
        NormStats::Batch
    };
    let y = tape.batch_norm(xn, g, b, stats, state.eps)?;
    if phase == Phase::Train && mode == BufferMode::WithBuffer {
        let count = x.numel() / c;
        let (mean, var) = tape.norm_stats(y).expect("batch-norm node");
        let (mean, var) = (mean.to_vec(), var.to_vec());
        state.update(&mean, &var, count)?;
    }
    Ok(tape.value(y).clone())
}
