//! Temporal-ensembling consistency term.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeConfig {
    /// EMA momentum of the per-sample prediction average.
    pub ema: f64,
    pub w_max: f64,
    /// Epochs over which the weight ramps up; defaults to the first decay epoch.
    pub rampup: Option<usize>,
}

impl Default for TeConfig {
    fn default() -> Self {
        TeConfig {
            ema: 0.9,
            w_max: 30.0,
            rampup: None,
        }
    }
}

impl TeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ema) {
            return Err(Error::InvalidArgument(format!("te ema {} must lie in [0, 1)", self.ema)));
        }
        if !(self.w_max >= 0.0 && self.w_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("te w_max {} must be non-negative", self.w_max)));
        }
        Ok(())
    }
}

/// `w_max · exp(−5 (1 − min(t / rampup, 1))²)`.
pub fn te_weight(w_max: f64, epoch: usize, rampup: usize) -> f64 {
    let r = if rampup == 0 {
        1.0
    } else {
        (epoch as f64 / rampup as f64).min(1.0)
    };
    w_max * (-5.0 * (1.0 - r).powi(2)).exp()
}

/// Per-sample exponential moving average of softmax predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct TeState {
    pub ema: f64,
    pub n_out: usize,
    preds: Vec<f64>,
    updates: Vec<u32>,
}

impl TeState {
    pub fn new(samples: usize, n_out: usize, ema: f64) -> Self {
        TeState {
            ema,
            n_out,
            preds: vec![0.0; samples * n_out],
            updates: vec![0; samples],
        }
    }

    /// Number of tracked samples.
    pub fn len(&self) -> usize {
        self.updates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }

    /// Bias-corrected average for sample `id`, `None` before its first update.
    pub fn corrected(&self, id: usize) -> Option<Vec<f64>> {
        let k = self.updates[id];
        if k == 0 {
            return None;
        }
        let c = 1.0 - self.ema.powi(k as i32);
        Some(self.preds[id * self.n_out..(id + 1) * self.n_out].iter().map(|p| p / c).collect())
    }

    /// Targets and mask for a batch of sample ids.
    pub fn targets(&self, ids: &[usize]) -> (Vec<f64>, Vec<bool>) {
        let mut target = vec![0.0; ids.len() * self.n_out];
        let mut mask = vec![false; ids.len()];
        for (row, &id) in ids.iter().enumerate() {
            if let Some(p) = self.corrected(id) {
                target[row * self.n_out..(row + 1) * self.n_out].copy_from_slice(&p);
                mask[row] = true;
            }
        }
        (target, mask)
    }

    /// Folds the softmax of `logits` (one row per id) into the averages.
    pub fn update(&mut self, ids: &[usize], logits: &Tensor) {
        let probs = softmax_rows(logits.data(), self.n_out);
        for (row, &id) in ids.iter().enumerate() {
            let slot = &mut self.preds[id * self.n_out..(id + 1) * self.n_out];
            for (s, p) in slot.iter_mut().zip(&probs[row * self.n_out..(row + 1) * self.n_out]) {
                *s = self.ema * *s + (1.0 - self.ema) * p;
            }
            self.updates[id] += 1;
        }
    }
}

/// Records `CE(logits, y) + w · mean‖softmax(logits) − p̂‖²` on `tape`.
/// Samples without history contribute only to the cross-entropy.
pub fn attach_te_loss(tape: &mut Tape, logits: NodeId, labels: &[usize], ids: &[usize], state: &TeState, weight: f64) -> Result<NodeId> {
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    if weight == 0.0 {
        return Ok(ce);
    }
    let (target, mask) = state.targets(ids);
    let cons = tape.softmax_mse(logits, &target, &mask)?;
    let scaled = tape.scale(cons, weight)?;
    tape.add(ce, scaled)
}

/// Value of the temporal-ensembling loss for given logits.
pub fn te_loss(logits: &Tensor, labels: &[usize], ids: &[usize], state: &TeState, weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone(), false);
    let root = attach_te_loss(&mut tape, l, labels, ids, state, weight)?;
    Ok(tape.value(root).item())
}
