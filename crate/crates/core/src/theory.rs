//! Numerical checks of the kernel-shift result, the normalization bound and
//! the buffer-swap behaviour.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{evaluate, AttackConfig, EvalOptions};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{BufferMode, ModelState, Network, Phase};
use crate::ntk::{compute_cross_entk, traced_kernel, KernelOptions, ProbeBatch};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Budgets `{0, 1, 2, 4, 8} / 255`.
pub fn default_epsilons() -> Vec<f64> {
    [0.0, 1.0, 2.0, 4.0, 8.0].iter().map(|v| v / 255.0).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct KernelShiftReport {
    pub epsilons: Vec<f64>,
    /// Trial-averaged relative shift for each budget.
    pub shift: Vec<f64>,
    /// `per_trial[t][e]`.
    pub per_trial: Vec<Vec<f64>>,
    pub trials: usize,
    /// Probability of `+ε` per pixel.
    pub p: f64,
    /// Least-squares slope of `log r` against `log ε` over positive budgets.
    pub slope: Option<f64>,
    pub monotone: bool,
    /// The same shift for the gradient-sign perturbation `ε·sign(∇ₓℓ)`,
    /// which is coupled to the input and the parameters.
    pub coupled_shift: Vec<f64>,
}

fn relative_shift(blocks: &[Matrix], base: &Matrix) -> f64 {
    let k = traced_kernel(blocks);
    let diff: f64 = k.data.iter().zip(&base.data).map(|(a, b)| (a - b).powi(2)).sum();
    diff.sqrt() / base.frobenius()
}

fn perturb(x: &Tensor, signs: &[f64], eps: f64) -> Result<Tensor> {
    Tensor::new(x.shape().to_vec(), x.data().iter().zip(signs).map(|(v, s)| v + eps * s).collect())
}

/// Relative Frobenius shift `‖Θ̂(X+Ω, X) − Θ̂(X, X)‖ / ‖Θ̂(X, X)‖` of the
/// traced kernel, with every pixel of `Ω` drawn independently as `+ε` or
/// `−ε` with probability one half. Perturbed inputs are not clipped. Each
/// trial draws one sign pattern and scales it to every budget.
pub fn kernel_shift(
    net: &Network,
    state: &ModelState,
    probe: &ProbeBatch,
    epsilons: &[f64],
    trials: usize,
    seed: u64,
    opts: &KernelOptions,
) -> Result<KernelShiftReport> {
    if !epsilons.contains(&0.0) {
        return Err(Error::InvalidArgument("the budget grid must include 0".into()));
    }
    if epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
        return Err(Error::InvalidArgument("budgets must be finite and non-negative".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    let x = &probe.x;
    let base = traced_kernel(&compute_cross_entk(net, state, x, x, opts)?);
    if base.frobenius() == 0.0 {
        return Err(Error::NumericFault { op: "reference kernel is zero" });
    }
    let per_trial = (0..trials)
        .map(|t| {
            let mut r = rng::indexed(seed, Purpose::Trials, t as u64);
            let signs: Vec<f64> = (0..x.numel()).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
            epsilons
                .iter()
                .map(|&eps| {
                    let xp = perturb(x, &signs, eps)?;
                    let r = relative_shift(&compute_cross_entk(net, state, &xp, x, opts)?, &base);
                    if r.is_finite() {
                        Ok(r)
                    } else {
                        Err(Error::NumericFault { op: "kernel shift" })
                    }
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let shift: Vec<f64> = (0..epsilons.len())
        .map(|e| per_trial.iter().map(|row| row[e]).sum::<f64>() / trials as f64)
        .collect();

    let (_, g) = crate::grad::grad_input(net, state, x, crate::grad::Loss::CrossEntropy(&probe.labels), Phase::Eval)?;
    let grad_signs: Vec<f64> = g.data().iter().map(|v| if *v > 0.0 { 1.0 } else if *v < 0.0 { -1.0 } else { 0.0 }).collect();
    let coupled_shift = epsilons
        .iter()
        .map(|&eps| Ok(relative_shift(&compute_cross_entk(net, state, &perturb(x, &grad_signs, eps)?, x, opts)?, &base)))
        .collect::<Result<Vec<f64>>>()?;

    let mut order: Vec<usize> = (0..epsilons.len()).collect();
    order.sort_by(|&a, &b| epsilons[a].total_cmp(&epsilons[b]));
    let monotone = order.windows(2).all(|w| shift[w[0]] <= shift[w[1]]);
    let points: Vec<(f64, f64)> = order
        .iter()
        .filter(|&&i| epsilons[i] > 0.0 && shift[i] > 0.0)
        .map(|&i| (epsilons[i].ln(), shift[i].ln()))
        .collect();
    Ok(KernelShiftReport {
        epsilons: epsilons.to_vec(),
        shift,
        per_trial,
        trials,
        p: 0.5,
        slope: fit_slope(&points),
        monotone,
        coupled_shift,
    })
}

/// Ordinary least-squares slope; `None` with fewer than two distinct x.
pub fn fit_slope(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FKind {
    Identity,
    Tanh,
}

impl FKind {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            FKind::Identity => v,
            FKind::Tanh => v.tanh(),
        }
    }

    /// Lipschitz constant.
    pub fn lipschitz(self) -> f64 {
        1.0
    }
}

/// How `A` in the bound is formed from the subset sums `S¹ = Σx`, `S² = Σx²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AVariant {
    /// `A = S² − (S¹)²`, which can be negative.
    Statement,
    /// `A = α·S² − (S¹)² = α²·(biased subset variance) ≥ 0`.
    ProofConsistent,
}

/// Smallest subset standard deviation accepted.
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct BoundElement {
    pub subset: usize,
    pub x: f64,
    pub lhs: f64,
    pub rhs: f64,
}

impl BoundElement {
    pub fn margin(&self) -> f64 {
        self.rhs - self.lhs
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundReport {
    pub f: FKind,
    pub alpha: usize,
    pub k: usize,
    pub c: f64,
    pub variant: AVariant,
    pub expected_a: f64,
    /// `E(A) ≤ 0`: the right-hand side is undefined and no element is bounded.
    pub infeasible: bool,
    pub elements: Vec<BoundElement>,
}

impl BoundReport {
    pub fn min_margin(&self) -> Option<f64> {
        self.elements.iter().map(BoundElement::margin).min_by(f64::total_cmp)
    }
}

/// Evaluates both sides of the normalization bound on the given subsets.
/// Subset statistics are the mean `Σ̃ᵢ` and biased standard deviation
/// `Π̃ᵢ`; the population estimators are `Σ = mean(Σ̃ᵢ)` and
/// `Π = √(α/(α−1)·mean(Π̃ᵢ²))`. Expectations over subsets are sample means
/// over the `k` subsets.
pub fn normalization_bound_on_subsets(f: FKind, subsets: &[Vec<f64>], variant: AVariant) -> Result<BoundReport> {
    let k = subsets.len();
    let alpha = subsets.first().map_or(0, Vec::len);
    if k == 0 || alpha < 2 || subsets.iter().any(|s| s.len() != alpha) {
        return Err(Error::InvalidArgument("need at least one subset, all of the same size α ≥ 2".into()));
    }
    let a = alpha as f64;
    let mut means = Vec::with_capacity(k);
    let mut stds = Vec::with_capacity(k);
    let mut s1 = Vec::with_capacity(k);
    let mut a_vals = Vec::with_capacity(k);
    for s in subsets {
        let sum: f64 = s.iter().sum();
        let sq: f64 = s.iter().map(|v| v * v).sum();
        let mean = sum / a;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a;
        means.push(mean);
        stds.push(var.sqrt());
        s1.push(sum);
        a_vals.push(match variant {
            AVariant::Statement => sq - sum * sum,
            AVariant::ProofConsistent => a * sq - sum * sum,
        });
    }
    let kf = k as f64;
    let sigma = means.iter().sum::<f64>() / kf;
    let pi = (a / (a - 1.0) * stds.iter().map(|s| s * s).sum::<f64>() / kf).sqrt();
    let expected_a = a_vals.iter().sum::<f64>() / kf;
    let expected_s1 = s1.iter().sum::<f64>() / kf;
    let c = f.lipschitz();
    let infeasible = expected_a <= 0.0;
    let mut elements = Vec::new();
    if !infeasible {
        if let Some((i, &std)) = stds.iter().enumerate().find(|(_, s)| **s <= DEGENERATE_STD) {
            return Err(Error::DegenerateSubset { subset: i, std });
        }
        let root = expected_a.sqrt();
        for (i, s) in subsets.iter().enumerate() {
            for &x in s {
                let lhs = (f.apply((x - means[i]) / stds[i]) - f.apply((x - sigma) / pi)).abs();
                let rhs = c * x.abs() * (1.0 / stds[i] + a / root) + c * ((means[i] / stds[i]).abs() + (expected_s1 / root).abs());
                elements.push(BoundElement { subset: i, x, lhs, rhs });
            }
        }
    }
    Ok(BoundReport {
        f,
        alpha,
        k,
        c,
        variant,
        expected_a,
        infeasible,
        elements,
    })
}

/// Draws `k` disjoint subsets of size `α` from `x` and evaluates the bound.
pub fn normalization_bound(f: FKind, x: &[f64], alpha: usize, k: usize, seed: u64, variant: AVariant) -> Result<BoundReport> {
    if alpha < 2 {
        return Err(Error::InvalidArgument(format!("subset size α = {alpha} must be at least 2")));
    }
    if k == 0 || k * alpha > x.len() {
        return Err(Error::InvalidArgument(format!(
            "{k} disjoint subsets of size {alpha} do not fit in {} elements",
            x.len()
        )));
    }
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.shuffle(&mut rng::stream(seed, Purpose::Trials));
    let subsets: Vec<Vec<f64>> = idx[..k * alpha].chunks(alpha).map(|c| c.iter().map(|&i| x[i]).collect()).collect();
    normalization_bound_on_subsets(f, &subsets, variant)
}

/// `trials` independent bound evaluations, each on a fresh standard-normal
/// population of `population` elements.
pub fn normalization_bound_trials(
    f: FKind,
    alpha: usize,
    k: usize,
    population: usize,
    trials: usize,
    seed: u64,
    variant: AVariant,
) -> Result<Vec<BoundReport>> {
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::indexed(seed, Purpose::Trials, t as u64);
            let x: Vec<f64> = (0..population).map(|_| StandardNormal.sample(&mut r)).collect();
            normalization_bound(f, &x, alpha, k, r.random(), variant)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BufferSwapReport {
    pub clean_with: f64,
    pub clean_without: f64,
    pub robust_with: f64,
    pub robust_without: f64,
    /// `clean_with − clean_without`.
    pub delta_clean: f64,
    /// `robust_with − robust_without`.
    pub delta_robust: f64,
}

/// Clean and robust test accuracy with the running buffers and with batch
/// statistics in their place.
pub fn proposition_buffer_swap(
    net: &Network,
    state: &ModelState,
    test: &Dataset,
    attack: &AttackConfig,
    batch_size: usize,
    seed: u64,
) -> Result<BufferSwapReport> {
    let acc = |mode, attack: Option<&AttackConfig>| {
        evaluate(net, state, test, attack, &EvalOptions { batch_size, mode, seed })
    };
    let clean_with = acc(BufferMode::WithBuffer, None)?;
    let clean_without = acc(BufferMode::WithoutBuffer, None)?;
    let robust_with = acc(BufferMode::WithBuffer, Some(attack))?;
    let robust_without = acc(BufferMode::WithoutBuffer, Some(attack))?;
    Ok(BufferSwapReport {
        clean_with,
        clean_without,
        robust_with,
        robust_without,
        delta_clean: clean_with - clean_without,
        delta_robust: robust_with - robust_without,
    })
}
