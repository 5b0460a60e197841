//! Empirical NTK class blocks on a probe set and the metrics built on them.
//!
//! Block `i` is `J_i J_iᵀ` where row `j` of `J_i` is `∇_θ f^i(x_j)`. Batch
//! norm uses frozen statistics (the running buffers, or the probe batch's
//! own statistics without buffers) so every row depends on its sample only.

mod eigen;
mod metrics;
pub mod snapshot;

pub use eigen::{jacobi_eigvals, sym_eigvals, Spectrum, MAX_SWEEPS, OFF_DIAGONAL_TOL, PSD_TOL};
pub use metrics::{
    alignment, effective_rank, effective_rank_of, kernel_distance, kernel_specialization, ks_matrix, KsMatrix,
    LabelSource, RANK_CUTOFF,
};

use crate::attack::{generate, AttackConfig};
use crate::data::{Dataset, ProbeSet};
use crate::error::{Error, Result};
use crate::grad::{check_budget, per_sample_jacobians};
use crate::linalg::Matrix;
use crate::model::{FrozenStats, ModelState, Network, Phase};
use crate::rng;
use crate::tensor::Tensor;

/// Default cap on resident Jacobian bytes.
pub const DEFAULT_MEMORY_LIMIT: usize = 1 << 30;

/// The diagonal class blocks of an ENTK together with the probe they were
/// computed on.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassKernel {
    pub blocks: Vec<Matrix>,
    pub probe_ids: Vec<u32>,
    /// Ground-truth labels.
    pub cl: Vec<u16>,
    /// Predicted labels on the kernel's inputs, present for adversarial kernels.
    pub al: Option<Vec<u16>>,
}

impl ClassKernel {
    pub fn n(&self) -> usize {
        self.probe_ids.len()
    }

    pub fn n_out(&self) -> usize {
        self.blocks.len()
    }

    /// Mean of the class blocks.
    pub fn traced(&self) -> Matrix {
        traced_kernel(&self.blocks)
    }

    /// Largest relative asymmetry `‖K − Kᵀ‖_F / ‖K‖_F` over the blocks.
    pub fn max_asymmetry(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                let norm = b.frobenius();
                if norm == 0.0 {
                    return 0.0;
                }
                let mut s = 0.0;
                for i in 0..b.rows {
                    for j in 0..b.cols {
                        s += (b.get(i, j) - b.get(j, i)).powi(2);
                    }
                }
                s.sqrt() / norm
            })
            .fold(0.0, f64::max)
    }

    /// Errors unless both kernels were computed on the same probe.
    pub fn check_same_probe(&self, other: &ClassKernel) -> Result<()> {
        if self.probe_ids != other.probe_ids {
            return Err(Error::ProbeMismatch);
        }
        Ok(())
    }
}

/// Elementwise mean of equally shaped blocks.
pub fn traced_kernel(blocks: &[Matrix]) -> Matrix {
    let first = &blocks[0];
    let mut out = Matrix::zeros(first.rows, first.cols);
    for b in blocks {
        for (o, v) in out.data.iter_mut().zip(&b.data) {
            *o += v;
        }
    }
    let n = blocks.len() as f64;
    out.data.iter_mut().for_each(|v| *v /= n);
    out
}

/// Probe inputs with their labels and dataset ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<u32>,
}

impl ProbeBatch {
    pub fn from_dataset(ds: &Dataset, probe: &ProbeSet) -> Self {
        ProbeBatch {
            x: ds.images.gather(probe.indices()),
            labels: probe.indices().iter().map(|&i| ds.labels[i]).collect(),
            ids: probe.indices().iter().map(|&i| i as u32).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum KernelMode {
    Clean,
    /// Adversarial examples generated from the probe with the current
    /// parameters; `seed` drives the random start.
    Adversarial { attack: AttackConfig, seed: u64 },
}

#[derive(Clone, Copy, Debug)]
pub struct KernelOptions {
    /// Upper bound on Jacobian bytes held at once. Classes are processed in
    /// groups that fit; a single class that does not fit is an error.
    pub memory_limit: usize,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions {
            memory_limit: DEFAULT_MEMORY_LIMIT,
        }
    }
}

fn class_groups(n: usize, p: usize, n_out: usize, limit: usize) -> Result<Vec<Vec<usize>>> {
    check_budget("class Jacobian", n, p, limit)?;
    let per_class = (n * p * 8).max(1);
    let group = (limit / per_class).clamp(1, n_out.max(1));
    Ok((0..n_out).collect::<Vec<_>>().chunks(group).map(|c| c.to_vec()).collect())
}

/// Class blocks `J_i(X₁) J_i(X₂)ᵀ` under fixed normalization statistics.
pub fn cross_blocks(
    net: &Network,
    state: &ModelState,
    x1: &Tensor,
    x2: Option<&Tensor>,
    stats: &FrozenStats,
    opts: &KernelOptions,
) -> Result<Vec<Matrix>> {
    let p = net.param_count();
    let rows = x1.batch() + x2.map_or(0, |x| x.batch());
    let mut blocks = Vec::with_capacity(net.n_out());
    for group in class_groups(rows, p, net.n_out(), opts.memory_limit)? {
        let j1 = per_sample_jacobians(net, state, x1, stats, &group, opts.memory_limit)?;
        match x2 {
            None => blocks.extend(j1.iter().map(|j| j.mul_transpose(j))),
            Some(x2) => {
                let j2 = per_sample_jacobians(net, state, x2, stats, &group, opts.memory_limit)?;
                blocks.extend(j1.iter().zip(&j2).map(|(a, b)| a.mul_transpose(b)));
            }
        }
    }
    Ok(blocks)
}

/// ENTK class blocks on the probe. The adversarial mode first attacks the
/// probe (batch norm in evaluation behaviour) and records the model's
/// predictions on the adversarial inputs as AL.
pub fn compute_entk(
    net: &Network,
    state: &ModelState,
    probe: &ProbeBatch,
    mode: &KernelMode,
    opts: &KernelOptions,
) -> Result<ClassKernel> {
    let (x, al) = match mode {
        KernelMode::Clean => (probe.x.clone(), None),
        KernelMode::Adversarial { attack, seed } => {
            let mut r = rng::stream(*seed, rng::Purpose::ProbeAttack);
            let adv = generate(net, state, &probe.x, &probe.labels, attack, Phase::Eval, &mut r)?;
            let pred = net.forward(state, &adv, Phase::Eval)?.argmax_rows();
            (adv, Some(pred.into_iter().map(|l| l as u16).collect()))
        }
    };
    let stats = net.eval_stats(state, &x)?;
    let blocks = cross_blocks(net, state, &x, None, &stats, opts)?;
    Ok(ClassKernel {
        blocks,
        probe_ids: probe.ids.clone(),
        cl: probe.labels.iter().map(|&l| l as u16).collect(),
        al,
    })
}

/// `Θ(X₁, X₂)` class blocks, normalizing with the evaluation statistics of
/// `x2` (the reference inputs).
pub fn compute_cross_entk(
    net: &Network,
    state: &ModelState,
    x1: &Tensor,
    x2: &Tensor,
    opts: &KernelOptions,
) -> Result<Vec<Matrix>> {
    let stats = net.eval_stats(state, x2)?;
    cross_blocks(net, state, x1, Some(x2), &stats, opts)
}
