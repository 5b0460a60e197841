//! l∞ gradient-sign attacks and accuracy evaluation.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad::{grad_input, Loss};
use crate::model::{BufferMode, ModelState, Network, Phase};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// l∞ budget.
    pub epsilon: f64,
    /// Step size.
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
}

impl AttackConfig {
    /// Single step with `ε = α = 8/255`.
    pub fn fgsm() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            alpha: 8.0 / 255.0,
            steps: 1,
            random_start: false,
        }
    }

    /// PGD-`steps` with `ε = 8/255`, `α = 2/255` and a random start.
    pub fn pgd(steps: usize) -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps,
            random_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon {} must be finite and ≥ 0", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha {} must be finite and > 0", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("attack needs at least one step".into()));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clip[0,1](x + α·sign(∇ₓ CE))`, no projection. `phase` selects how
/// batch norm behaves while the gradient is taken.
pub fn fgsm(net: &Network, state: &ModelState, x: &Tensor, labels: &[usize], cfg: &AttackConfig, phase: Phase) -> Result<Tensor> {
    cfg.validate()?;
    let (_, g) = grad_input(net, state, x, Loss::CrossEntropy(labels), phase)?;
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &d)| (v + cfg.alpha * sign(d)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Projected gradient-sign ascent inside the ε-ball around `x`, clipped to
/// `[0, 1]` after every step. Returns the final point and the loss at every
/// iterate the gradient was taken at.
pub fn pgd_traced<R: Rng + ?Sized>(
    net: &Network,
    state: &ModelState,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    phase: Phase,
    rng: &mut R,
) -> Result<(Tensor, Vec<f64>)> {
    cfg.validate()?;
    let eps = cfg.epsilon;
    let x0 = x.data();
    let mut cur: Vec<f64> = if cfg.random_start && eps > 0.0 {
        x0.iter().map(|&v| (v + rng.random_range(-eps..=eps)).clamp(0.0, 1.0)).collect()
    } else {
        x0.to_vec()
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let xt = Tensor::new(x.shape().to_vec(), cur)?;
        let (loss, g) = grad_input(net, state, &xt, Loss::CrossEntropy(labels), phase)?;
        losses.push(loss);
        cur = xt
            .data()
            .iter()
            .zip(g.data())
            .zip(x0)
            .map(|((&v, &d), &o)| (v + cfg.alpha * sign(d)).clamp(o - eps, o + eps).clamp(0.0, 1.0))
            .collect();
    }
    Ok((Tensor::new(x.shape().to_vec(), cur)?, losses))
}

pub fn pgd<R: Rng + ?Sized>(
    net: &Network,
    state: &ModelState,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    phase: Phase,
    rng: &mut R,
) -> Result<Tensor> {
    Ok(pgd_traced(net, state, x, labels, cfg, phase, rng)?.0)
}

/// FGSM when `steps == 1` without random start, PGD otherwise.
pub fn generate<R: Rng + ?Sized>(
    net: &Network,
    state: &ModelState,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    phase: Phase,
    rng: &mut R,
) -> Result<Tensor> {
    if cfg.steps == 1 && !cfg.random_start {
        fgsm(net, state, x, labels, cfg, phase)
    } else {
        pgd(net, state, x, labels, cfg, phase, rng)
    }
}

/// Splits `0..m` into consecutive batches; a trailing single sample is
/// folded into the previous batch so batch statistics stay defined.
pub fn eval_batches(m: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let bs = batch_size.max(1);
    let mut out: Vec<std::ops::Range<usize>> = (0..m).step_by(bs).map(|s| s..(s + bs).min(m)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

/// Options for [`evaluate`].
#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub mode: BufferMode,
    /// Seeds the random starts of the attack, one stream per batch.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            batch_size: 128,
            mode: BufferMode::WithBuffer,
            seed: 0,
        }
    }
}

/// Fraction of argmax-correct predictions on `ds`, or on adversarial
/// examples generated batch by batch when `attack` is given. The state's
/// buffer mode is overridden by `opts.mode`.
pub fn evaluate(net: &Network, state: &ModelState, ds: &Dataset, attack: Option<&AttackConfig>, opts: &EvalOptions) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let mut st = state.clone();
    st.set_buffer_mode(opts.mode);
    let batches = eval_batches(ds.len(), opts.batch_size);
    let correct: Vec<usize> = batches
        .par_iter()
        .enumerate()
        .map(|(b, range)| -> Result<usize> {
            let idx: Vec<usize> = range.clone().collect();
            let x = ds.images.gather(&idx);
            let labels = &ds.labels[range.clone()];
            let x = match attack {
                Some(cfg) => {
                    let mut r = rng::indexed(opts.seed, rng::Purpose::EvalAttack, b as u64);
                    generate(net, &st, &x, labels, cfg, Phase::Eval, &mut r)?
                }
                None => x,
            };
            let pred = net.forward(&st, &x, Phase::Eval)?.argmax_rows();
            Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count())
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / ds.len() as f64)
}
