//! Full training runs with per-epoch evaluation and kernel snapshots.

use std::time::Instant;

use crate::attack::{evaluate, EvalOptions};
use crate::data::Dataset;
use crate::error::Result;
use crate::model::{ModelState, Network};
use crate::ntk::{compute_entk, effective_rank, kernel_distance, kernel_specialization, ks_matrix, ClassKernel, KernelMode, KernelOptions, LabelSource, ProbeBatch};
use crate::train::{EpochStats, Trainer, TrainConfig};

/// One line of the metric trace. Kernel columns are `None` on epochs
/// without a snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_clean_acc: f64,
    pub test_clean_acc: f64,
    pub test_robust_acc: f64,
    pub train_loss: f64,
    pub kd_clean: Option<f64>,
    pub kd_adv: Option<f64>,
    pub ker_clean: Option<f64>,
    pub ker_adv: Option<f64>,
    pub ks_cl_clean: Option<f64>,
    pub ks_cl_adv: Option<f64>,
    pub ks_al_adv: Option<f64>,
    pub grad_evals: u64,
}

/// Receives every finished epoch; kernels are present on snapshot epochs.
pub trait RunSink {
    fn epoch(&mut self, row: &TraceRow, wall_seconds: f64, state: &ModelState, kernels: Option<(&ClassKernel, &ClassKernel)>) -> Result<()>;
}

impl RunSink for () {
    fn epoch(&mut self, _: &TraceRow, _: f64, _: &ModelState, _: Option<(&ClassKernel, &ClassKernel)>) -> Result<()> {
        Ok(())
    }
}

/// Keeps snapshot kernels in memory.
#[derive(Default)]
pub struct MemorySink {
    pub snapshots: Vec<(usize, ClassKernel, ClassKernel)>,
}

impl RunSink for MemorySink {
    fn epoch(&mut self, row: &TraceRow, _: f64, _: &ModelState, kernels: Option<(&ClassKernel, &ClassKernel)>) -> Result<()> {
        if let Some((c, a)) = kernels {
            self.snapshots.push((row.epoch, c.clone(), a.clone()));
        }
        Ok(())
    }
}

pub struct RunOutput {
    pub state: ModelState,
    pub rows: Vec<TraceRow>,
    pub epochs: Vec<EpochStats>,
    pub wall_seconds: Vec<f64>,
}

/// Seed for the attacks run while evaluating or snapshotting `epoch`.
/// Epoch `None` is the initialization.
pub fn epoch_seed(seed: u64, epoch: Option<usize>) -> u64 {
    let k = epoch.map_or(0, |e| e as u64 + 1);
    seed ^ k.wrapping_mul(0xA24B_AED4_963E_E407)
}

pub fn is_snapshot_epoch(cfg: &TrainConfig, epoch: usize) -> bool {
    cfg.probe_interval > 0 && ((epoch + 1) % cfg.probe_interval == 0 || epoch + 1 == cfg.epochs)
}

fn kernels(net: &Network, state: &ModelState, cfg: &TrainConfig, probe: &ProbeBatch, epoch: Option<usize>) -> Result<(ClassKernel, ClassKernel)> {
    let opts = KernelOptions {
        memory_limit: cfg.memory_limit,
    };
    let clean = compute_entk(net, state, probe, &KernelMode::Clean, &opts)?;
    let adv = compute_entk(
        net,
        state,
        probe,
        &KernelMode::Adversarial {
            attack: cfg.kernel_attack(),
            seed: epoch_seed(cfg.seed, epoch),
        },
        &opts,
    )?;
    Ok((clean, adv))
}

/// Trains for `cfg.epochs` epochs. After each epoch the model is evaluated
/// on the clean training set, the clean test set and the test set under
/// `cfg.eval_attack`; on snapshot epochs the clean and adversarial kernels
/// of `probe` are computed and their metrics recorded, with KD taken
/// against the previous snapshot (the initialization for the first one).
pub fn run_training(
    net: &Network,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    probe: Option<&ProbeBatch>,
    sink: &mut dyn RunSink,
) -> Result<RunOutput> {
    let mut trainer = Trainer::new(net, cfg.clone(), train.len())?;
    let mut prev = match probe {
        Some(p) if cfg.probe_interval > 0 => Some(kernels(net, &trainer.state, cfg, p, None)?),
        _ => None,
    };
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut wall = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let s = trainer.train_epoch(epoch, train)?;
        let state = &trainer.state;
        let eval = |ds: &Dataset, attack| {
            let opts = EvalOptions {
                batch_size: cfg.eval_batch_size,
                mode: state.mode,
                seed: epoch_seed(cfg.seed, Some(epoch)),
            };
            evaluate(net, state, ds, attack, &opts)
        };
        let mut row = TraceRow {
            epoch,
            lr: s.lr,
            train_clean_acc: eval(train, None)?,
            test_clean_acc: eval(test, None)?,
            test_robust_acc: eval(test, Some(&cfg.eval_attack))?,
            train_loss: s.loss,
            kd_clean: None,
            kd_adv: None,
            ker_clean: None,
            ker_adv: None,
            ks_cl_clean: None,
            ks_cl_adv: None,
            ks_al_adv: None,
            grad_evals: s.grad_evals,
        };
        let snap = match probe {
            Some(p) if is_snapshot_epoch(cfg, epoch) => Some(kernels(net, state, cfg, p, Some(epoch))?),
            _ => None,
        };
        if let Some((clean, adv)) = &snap {
            let (tc, ta) = (clean.traced(), adv.traced());
            if let Some((pc, pa)) = &prev {
                row.kd_clean = Some(kernel_distance(&tc, &pc.traced())?);
                row.kd_adv = Some(kernel_distance(&ta, &pa.traced())?);
            }
            row.ker_clean = Some(effective_rank(&tc)?);
            row.ker_adv = Some(effective_rank(&ta)?);
            row.ks_cl_clean = Some(kernel_specialization(&ks_matrix(clean, LabelSource::Cl)?));
            row.ks_cl_adv = Some(kernel_specialization(&ks_matrix(adv, LabelSource::Cl)?));
            row.ks_al_adv = Some(kernel_specialization(&ks_matrix(adv, LabelSource::Al)?));
        }
        let seconds = start.elapsed().as_secs_f64();
        sink.epoch(&row, seconds, state, snap.as_ref().map(|(c, a)| (c, a)))?;
        if snap.is_some() {
            prev = snap;
        }
        rows.push(row);
        stats.push(s);
        wall.push(seconds);
    }
    Ok(RunOutput {
        state: trainer.state,
        rows,
        epochs: stats,
        wall_seconds: wall,
    })
}

/// First epoch whose value dropped by more than half relative to any of the
/// preceding `window` epochs.
pub fn detect_collapse(series: &[f64], window: usize) -> Option<usize> {
    (1..series.len()).find(|&t| {
        let from = t.saturating_sub(window);
        series[from..t].iter().any(|&s| s > 0.0 && (s - series[t]) / s > 0.5)
    })
}
