//! Config-driven runs behind the command-line tool: training runs with
//! kernel snapshots, metric commands on snapshot files, theory checks and
//! case studies. Every command writes into a caller-chosen directory.

mod config;
mod trace;

pub use config::{
    parse_config, parse_config_str, BnBufferSection, CaseConfig, CheckConfig, DataConfig, DataSource, ExperimentConfig,
    ModelConfig, Profile, StrategyConfig, StrategyKind, SyntheticSection, Thm1Section, Thm2Section, TrainSection,
};
pub use trace::{format_row, parse_trace, read_trace, write_trace, TIMING_HEADER, TRACE_HEADER};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{sample_probe, Dataset};
use crate::error::{Error, Result};
use crate::model::{build_model, checkpoint, ModelState, Network};
use crate::ntk::{
    compute_entk, effective_rank, kernel_distance, kernel_specialization, ks_matrix, snapshot, ClassKernel, KernelMode,
    KernelOptions, KsMatrix, LabelSource, ProbeBatch,
};
use crate::theory::{self, AVariant, BufferSwapReport, FKind, KernelShiftReport};
use crate::train::{detect_collapse, run_training, RunSink, Strategy, TraceRow, TrainConfig};

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(p, contents).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(p: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        what: "json report",
        detail: e.to_string(),
    })?;
    write_file(p, text + "\n")
}

/// Stratified probe drawn from the training set.
pub fn probe_batch(train: &Dataset, size: usize, seed: u64) -> Result<ProbeBatch> {
    Ok(ProbeBatch::from_dataset(train, &sample_probe(train, size, seed)?))
}

/// Loads a checkpoint and checks that it belongs to `net`.
pub fn load_state(net: &Network, path: &Path) -> Result<ModelState> {
    let state = checkpoint::load(path)?;
    if state.params.layout() != net.layout() || state.norms.len() != net.norm_channels().len() {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("{} does not match the configured model", path.display()),
        });
    }
    Ok(state)
}

/// Files of one training run.
pub struct RunDir {
    root: PathBuf,
    trace: BufWriter<File>,
    timing: BufWriter<File>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        create_dir(&root.join("checkpoints"))?;
        create_dir(&root.join("kernels"))?;
        let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let p = root.join(name);
            let mut w = BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?);
            writeln!(w, "{header}").map_err(|e| Error::io(&p, e))?;
            Ok(w)
        };
        Ok(RunDir {
            trace: open("trace.csv", TRACE_HEADER)?,
            timing: open("timing.csv", TIMING_HEADER)?,
            root: root.to_path_buf(),
        })
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch:03}.ckpt"))
    }

    pub fn kernel_path(&self, epoch: usize, kind: &str) -> PathBuf {
        self.root.join("kernels").join(format!("epoch_{epoch:03}_{kind}.entk"))
    }
}

impl RunSink for RunDir {
    fn epoch(&mut self, row: &TraceRow, wall: f64, state: &ModelState, kernels: Option<(&ClassKernel, &ClassKernel)>) -> Result<()> {
        let tp = self.root.join("trace.csv");
        writeln!(self.trace, "{}", format_row(row))
            .and_then(|_| self.trace.flush())
            .map_err(|e| Error::io(&tp, e))?;
        let wp = self.root.join("timing.csv");
        writeln!(self.timing, "{},{wall}", row.epoch)
            .and_then(|_| self.timing.flush())
            .map_err(|e| Error::io(&wp, e))?;
        if let Some((clean, adv)) = kernels {
            checkpoint::save(state, &self.checkpoint_path(row.epoch))?;
            snapshot::save(clean, &self.kernel_path(row.epoch, "clean"))?;
            snapshot::save(adv, &self.kernel_path(row.epoch, "adv"))?;
        }
        Ok(())
    }
}

const FIGURE_SERIES: [&str; 9] = [
    "test_clean_acc",
    "test_robust_acc",
    "kd_clean",
    "kd_adv",
    "ker_clean",
    "ker_adv",
    "ks_cl_clean",
    "ks_cl_adv",
    "ks_al_adv",
];

fn series(r: &TraceRow, name: &str) -> Option<f64> {
    match name {
        "test_clean_acc" => Some(r.test_clean_acc),
        "test_robust_acc" => Some(r.test_robust_acc),
        "kd_clean" => r.kd_clean,
        "kd_adv" => r.kd_adv,
        "ker_clean" => r.ker_clean,
        "ker_adv" => r.ker_adv,
        "ks_cl_clean" => r.ks_cl_clean,
        "ks_cl_adv" => r.ks_cl_adv,
        "ks_al_adv" => r.ks_al_adv,
        _ => None,
    }
}

/// One `epoch,value` file per plotted quantity under `figures/`.
pub fn write_figure_data(dir: &Path, rows: &[TraceRow]) -> Result<()> {
    let fig = dir.join("figures");
    create_dir(&fig)?;
    for name in FIGURE_SERIES {
        let mut text = String::from("epoch,value\n");
        for r in rows {
            if let Some(v) = series(r, name) {
                text.push_str(&format!("{},{v}\n", r.epoch));
            }
        }
        write_file(&fig.join(format!("{name}.csv")), text)?;
    }
    Ok(())
}

pub struct TrainSummary {
    pub dir: PathBuf,
    pub rows: Vec<TraceRow>,
}

/// Trains per `cfg` and writes `trace.csv`, `timing.csv`,
/// `checkpoints/epoch_*.ckpt`, `kernels/epoch_*_{clean,adv}.entk`, the
/// resolved configuration (`config.toml`), the seed (`seed.txt`) and
/// per-figure data files into `out`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let tc = cfg.train_config()?;
    let (train, test) = cfg.datasets()?;
    let net = cfg.network(&train)?;
    let probe = if tc.probe_interval > 0 {
        Some(probe_batch(&train, cfg.data.probe_size, cfg.seed)?)
    } else {
        None
    };
    create_dir(out)?;
    write_file(&out.join("config.toml"), cfg.to_toml()?)?;
    write_file(&out.join("seed.txt"), format!("{}\n", cfg.seed))?;
    let mut dir = RunDir::create(out)?;
    let result = run_training(&net, &tc, &train, &test, probe.as_ref(), &mut dir)?;
    write_figure_data(out, &result.rows)?;
    Ok(TrainSummary {
        dir: out.to_path_buf(),
        rows: result.rows,
    })
}

/// KD between the traced kernels of two snapshots of the same probe.
pub fn metric_kd(a: &Path, b: &Path) -> Result<f64> {
    let (ka, kb) = (snapshot::load(a)?, snapshot::load(b)?);
    ka.check_same_probe(&kb)?;
    kernel_distance(&ka.traced(), &kb.traced())
}

/// Effective rank of a snapshot's traced kernel.
pub fn metric_ker(a: &Path) -> Result<f64> {
    effective_rank(&snapshot::load(a)?.traced())
}

/// Specialization matrix and its strength.
pub fn metric_ks(a: &Path, labels: LabelSource) -> Result<(f64, KsMatrix)> {
    let m = ks_matrix(&snapshot::load(a)?, labels)?;
    Ok((kernel_specialization(&m), m))
}

#[derive(Clone, Debug, Serialize)]
pub struct KernelShiftSummary {
    pub epsilons: Vec<f64>,
    pub mean_shift: Vec<f64>,
    pub coupled_shift: Vec<f64>,
    pub slope: Option<f64>,
    pub monotone: bool,
    pub trials: usize,
    pub p: f64,
}

/// Writes `thm1.csv` (one row per trial and budget) and `thm1_summary.json`.
pub fn check_thm1(cfg: &ExperimentConfig, out: &Path) -> Result<KernelShiftReport> {
    let s = &cfg.check.thm1;
    let (train, _) = cfg.datasets()?;
    let probe = probe_batch(&train, s.probe_size, cfg.seed)?;
    let net = Network::new(crate::model::architecture(&s.arch, train.image_shape(), train.class_count, s.width)?)?;
    let mut state = match &s.checkpoint {
        Some(p) => load_state(&net, p)?,
        None => build_model(&net, s.init, cfg.seed)?,
    };
    state.set_buffer_mode(cfg.model.buffer_mode);
    let opts = KernelOptions {
        memory_limit: cfg.train.memory_limit_mb.saturating_mul(1 << 20),
    };
    let rep = theory::kernel_shift(&net, &state, &probe, &s.epsilons, s.trials, cfg.seed, &opts)?;
    create_dir(out)?;
    let mut csv = String::from("trial,epsilon,shift\n");
    for (t, row) in rep.per_trial.iter().enumerate() {
        for (e, r) in rep.epsilons.iter().zip(row) {
            csv.push_str(&format!("{t},{e},{r}\n"));
        }
    }
    write_file(&out.join("thm1.csv"), csv)?;
    write_json(
        &out.join("thm1_summary.json"),
        &KernelShiftSummary {
            epsilons: rep.epsilons.clone(),
            mean_shift: rep.shift.clone(),
            coupled_shift: rep.coupled_shift.clone(),
            slope: rep.slope,
            monotone: rep.monotone,
            trials: rep.trials,
            p: rep.p,
        },
    )?;
    Ok(rep)
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundGroup {
    pub variant: AVariant,
    pub f: FKind,
    pub trials: usize,
    pub infeasible: usize,
    /// Feasible trials with some element margin below `−1e-10`.
    pub violations: usize,
    pub min_margin: Option<f64>,
}

/// Margin below which a bound evaluation counts as violated.
pub const MARGIN_TOLERANCE: f64 = -1e-10;

/// Writes `thm2.csv` (the worst element of every trial) and
/// `thm2_summary.json`; returns one group per (variant, f).
pub fn check_thm2(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<BoundGroup>> {
    let s = &cfg.check.thm2;
    create_dir(out)?;
    let mut csv = String::from("variant,f,trial,infeasible,lhs,rhs,margin\n");
    let mut groups = Vec::new();
    for &variant in &s.variants {
        for f in [FKind::Identity, FKind::Tanh] {
            let reports = theory::normalization_bound_trials(f, s.alpha, s.k, s.population, s.trials, cfg.seed, variant)?;
            let tag = |v: AVariant| match v {
                AVariant::Statement => "statement",
                AVariant::ProofConsistent => "proof-consistent",
            };
            let fname = match f {
                FKind::Identity => "identity",
                FKind::Tanh => "tanh",
            };
            let mut g = BoundGroup {
                variant,
                f,
                trials: reports.len(),
                infeasible: 0,
                violations: 0,
                min_margin: None,
            };
            for (t, r) in reports.iter().enumerate() {
                let worst = r.elements.iter().min_by(|a, b| a.margin().total_cmp(&b.margin()));
                match worst {
                    Some(e) => {
                        csv.push_str(&format!("{},{fname},{t},false,{},{},{}\n", tag(variant), e.lhs, e.rhs, e.margin()));
                        if e.margin() < MARGIN_TOLERANCE {
                            g.violations += 1;
                        }
                        g.min_margin = Some(g.min_margin.map_or(e.margin(), |m: f64| m.min(e.margin())));
                    }
                    None => {
                        g.infeasible += 1;
                        csv.push_str(&format!("{},{fname},{t},true,,,\n", tag(variant)));
                    }
                }
            }
            groups.push(g);
        }
    }
    write_file(&out.join("thm2.csv"), csv)?;
    write_json(&out.join("thm2_summary.json"), &groups)?;
    Ok(groups)
}

/// Writes `bn_buffer.csv` and `bn_buffer.json` for the configured model.
pub fn check_bn_buffer(cfg: &ExperimentConfig, out: &Path) -> Result<BufferSwapReport> {
    let (train, test) = cfg.datasets()?;
    let net = cfg.network(&train)?;
    let state = match &cfg.check.bn_buffer.checkpoint {
        Some(p) => load_state(&net, p)?,
        None => build_model(&net, cfg.model.init, cfg.seed)?,
    };
    let rep = theory::proposition_buffer_swap(&net, &state, &test, &cfg.eval_attack, cfg.train.eval_batch_size, cfg.seed)?;
    create_dir(out)?;
    write_file(
        &out.join("bn_buffer.csv"),
        format!(
            "mode,clean_acc,robust_acc\nwith-buffer,{},{}\nwithout-buffer,{},{}\n",
            rep.clean_with, rep.robust_with, rep.clean_without, rep.robust_without
        ),
    )?;
    write_json(&out.join("bn_buffer.json"), &rep)?;
    Ok(rep)
}

/// Gradient evaluations of clean training for `switch_epoch` epochs and
/// `steps`-step adversarial training afterwards, relative to adversarial
/// training throughout.
pub fn analytic_cost_ratio(switch_epoch: usize, epochs: usize, steps: usize) -> f64 {
    let adv = (steps + 1) as f64;
    (switch_epoch as f64 + (epochs - switch_epoch) as f64 * adv) / (epochs as f64 * adv)
}

/// Published seconds per clean and per PGD-10 epoch of the 200-epoch reference runs.
pub const REFERENCE_CLEAN_EPOCH_SECONDS: f64 = 25.0;
pub const REFERENCE_AT_EPOCH_SECONDS: f64 = 90.0;

/// Wall-clock ratio from per-epoch timings.
pub fn wallclock_ratio(switch_epoch: usize, epochs: usize, clean_seconds: f64, adv_seconds: f64) -> f64 {
    (switch_epoch as f64 * clean_seconds + (epochs - switch_epoch) as f64 * adv_seconds) / (epochs as f64 * adv_seconds)
}

/// Percentage truncated (not rounded) to two decimals.
pub fn truncated_percent(ratio: f64) -> f64 {
    (ratio * 10_000.0).floor() / 100.0
}

#[derive(Clone, Debug, Serialize)]
pub struct SwitchRow {
    pub label: String,
    pub switch_epoch: Option<usize>,
    pub test_clean_acc: f64,
    pub test_robust_acc: f64,
    pub grad_evals: u64,
    pub cost_ratio: f64,
    pub analytic_ratio: f64,
    pub kd_to_baseline: f64,
}

fn inner_kind(cfg: &ExperimentConfig) -> StrategyKind {
    match cfg.strategy.kind {
        StrategyKind::Switch => cfg.strategy.inner.unwrap_or(StrategyKind::Pgd),
        StrategyKind::Normal => StrategyKind::Pgd,
        k => k,
    }
}

struct Trained {
    rows: Vec<TraceRow>,
    kernel: ClassKernel,
}

fn train_final_kernel(net: &Network, tc: &TrainConfig, train: &Dataset, test: &Dataset, probe: &ProbeBatch) -> Result<Trained> {
    let tc = TrainConfig {
        probe_interval: 0,
        ..tc.clone()
    };
    let out = run_training(net, &tc, train, test, None, &mut ())?;
    let kernel = compute_entk(
        net,
        &out.state,
        probe,
        &KernelMode::Clean,
        &KernelOptions {
            memory_limit: tc.memory_limit,
        },
    )?;
    Ok(Trained { rows: out.rows, kernel })
}

/// Adversarial training throughout against SwitchAT at each configured
/// fraction. Writes `switch.csv` and `switch_report.txt`.
pub fn case_switch(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SwitchRow>> {
    let mut base_cfg = cfg.clone();
    base_cfg.strategy.kind = inner_kind(cfg);
    base_cfg.strategy.inner = None;
    base_cfg.strategy.switch_epoch = None;
    base_cfg.strategy.switch_fraction = None;
    let base_tc = base_cfg.train_config()?;
    let steps = base_tc.strategy.attack().map_or(0, |a| a.steps);
    let (train, test) = cfg.datasets()?;
    let net = cfg.network(&train)?;
    let probe = probe_batch(&train, cfg.data.probe_size, cfg.seed)?;
    let epochs = base_tc.epochs;

    let base = train_final_kernel(&net, &base_tc, &train, &test, &probe)?;
    let base_evals: u64 = base.rows.iter().map(|r| r.grad_evals).sum();
    let last = |rows: &[TraceRow]| rows.last().map_or((0.0, 0.0), |r| (r.test_clean_acc, r.test_robust_acc));
    let (bc, br) = last(&base.rows);
    let mut rows = vec![SwitchRow {
        label: "baseline".into(),
        switch_epoch: None,
        test_clean_acc: bc,
        test_robust_acc: br,
        grad_evals: base_evals,
        cost_ratio: 1.0,
        analytic_ratio: 1.0,
        kd_to_baseline: 0.0,
    }];
    let base_traced = base.kernel.traced();
    for &f in &cfg.case.switch_fractions {
        let k = (f * epochs as f64).round() as usize;
        let tc = TrainConfig {
            strategy: Strategy::SwitchAt {
                switch_epoch: k,
                inner: Box::new(base_tc.strategy.clone()),
            },
            ..base_tc.clone()
        };
        let run = train_final_kernel(&net, &tc, &train, &test, &probe)?;
        let evals: u64 = run.rows.iter().map(|r| r.grad_evals).sum();
        let (c, r) = last(&run.rows);
        rows.push(SwitchRow {
            label: format!("switch-{f}"),
            switch_epoch: Some(k),
            test_clean_acc: c,
            test_robust_acc: r,
            grad_evals: evals,
            cost_ratio: evals as f64 / base_evals as f64,
            analytic_ratio: analytic_cost_ratio(k, epochs, steps),
            kd_to_baseline: kernel_distance(&run.kernel.traced(), &base_traced)?,
        });
    }
    create_dir(out)?;
    let mut csv = String::from("label,switch_epoch,test_clean_acc,test_robust_acc,grad_evals,cost_ratio,analytic_ratio,kd_to_baseline\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.label,
            r.switch_epoch.map_or(String::new(), |k| k.to_string()),
            r.test_clean_acc,
            r.test_robust_acc,
            r.grad_evals,
            r.cost_ratio,
            r.analytic_ratio,
            r.kd_to_baseline
        ));
    }
    write_file(&out.join("switch.csv"), csv)?;
    let mut report = String::new();
    report.push_str(&format!("switch case: {epochs} epochs, inner attack with {steps} steps\n\n"));
    report.push_str("label            switch  clean   robust  cost    analytic  kd_to_baseline\n");
    for r in &rows {
        report.push_str(&format!(
            "{:<16} {:>6}  {:.4}  {:.4}  {:.4}  {:.4}    {:.6}\n",
            r.label,
            r.switch_epoch.map_or("-".to_string(), |k| k.to_string()),
            r.test_clean_acc,
            r.test_robust_acc,
            r.cost_ratio,
            r.analytic_ratio,
            r.kd_to_baseline
        ));
    }
    report.push_str(&format!(
        "\nreference wall-clock ratios at 200 epochs ({REFERENCE_CLEAN_EPOCH_SECONDS} s clean, {REFERENCE_AT_EPOCH_SECONDS} s PGD-10 per epoch):\n  switch at 100: {:.2}%\n  switch at 140: {:.2}%\n",
        truncated_percent(wallclock_ratio(100, 200, REFERENCE_CLEAN_EPOCH_SECONDS, REFERENCE_AT_EPOCH_SECONDS)),
        truncated_percent(wallclock_ratio(140, 200, REFERENCE_CLEAN_EPOCH_SECONDS, REFERENCE_AT_EPOCH_SECONDS)),
    ));
    write_file(&out.join("switch_report.txt"), report)?;
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct OverfitRow {
    pub strategy: String,
    pub seed: u64,
    pub collapse_epoch: Option<usize>,
    pub final_clean_acc: f64,
    pub final_robust_acc: f64,
    /// KD of the final clean kernel to the FGSM-AT run with the same seed.
    pub kd_to_fgsm: f64,
    pub robust_trace: Vec<f64>,
}

/// FGSM-AT, NoiseFGSM-AT, TE and TE-OF for each configured seed. Writes
/// `overfit_trace.csv` and `overfit_summary.csv`.
pub fn case_overfit(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<OverfitRow>> {
    let kinds = [
        ("fgsm", StrategyKind::Fgsm),
        ("noise-fgsm", StrategyKind::NoiseFgsm),
        ("te", StrategyKind::Te),
        ("te-of", StrategyKind::TeOf),
    ];
    let mut results = Vec::new();
    for &seed in &cfg.case.overfit_seeds {
        let mut fgsm_kernel: Option<ClassKernel> = None;
        for (name, kind) in kinds {
            let mut c = cfg.clone();
            c.seed = seed;
            c.strategy = StrategyConfig {
                kind,
                epsilon: cfg.strategy.epsilon,
                noise: cfg.strategy.noise,
                ..StrategyConfig::default()
            };
            let tc = c.train_config()?;
            let (train, test) = c.datasets()?;
            let net = c.network(&train)?;
            let probe = probe_batch(&train, c.data.probe_size, seed)?;
            let run = train_final_kernel(&net, &tc, &train, &test, &probe)?;
            let robust: Vec<f64> = run.rows.iter().map(|r| r.test_robust_acc).collect();
            let kd = match &fgsm_kernel {
                Some(k) => kernel_distance(&run.kernel.traced(), &k.traced())?,
                None => 0.0,
            };
            let last = run.rows.last();
            results.push(OverfitRow {
                strategy: name.into(),
                seed,
                collapse_epoch: detect_collapse(&robust, cfg.case.collapse_window),
                final_clean_acc: last.map_or(0.0, |r| r.test_clean_acc),
                final_robust_acc: last.map_or(0.0, |r| r.test_robust_acc),
                kd_to_fgsm: kd,
                robust_trace: robust,
            });
            if kind == StrategyKind::Fgsm {
                fgsm_kernel = Some(run.kernel);
            }
        }
    }
    create_dir(out)?;
    let mut trace = String::from("strategy,seed,epoch,test_robust_acc\n");
    let mut summary = String::from("strategy,seed,collapse_epoch,final_clean_acc,final_robust_acc,kd_to_fgsm\n");
    for r in &results {
        for (e, v) in r.robust_trace.iter().enumerate() {
            trace.push_str(&format!("{},{},{e},{v}\n", r.strategy, r.seed));
        }
        summary.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.strategy,
            r.seed,
            r.collapse_epoch.map_or(String::new(), |e| e.to_string()),
            r.final_clean_acc,
            r.final_robust_acc,
            r.kd_to_fgsm
        ));
    }
    write_file(&out.join("overfit_trace.csv"), trace)?;
    write_file(&out.join("overfit_summary.csv"), summary)?;
    Ok(results)
}
