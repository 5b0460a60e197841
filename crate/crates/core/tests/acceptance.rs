//! Acceptance criteria, one `criterion N [PASS|FAIL|...]` line each.
//!
//! Runs without the libtest harness so the lines always reach the output.
//! Positional arguments select criteria by number or name substring.
//! The CIFAR-10 desk-profile criteria (7, 9 and the collapse half of 10)
//! need `NTKLAB_CIFAR_DIR` pointing at the binary batches and take hours on
//! a CPU; without it they report NOT RUN.

use std::path::{Path, PathBuf};
use std::time::Instant;

use approx::relative_eq;
use ntklab::experiment::{self, parse_config_str, ExperimentConfig, REFERENCE_AT_EPOCH_SECONDS, REFERENCE_CLEAN_EPOCH_SECONDS};
use ntklab::grad::{grad_input, grad_params, Loss};
use ntklab::linalg::{dot, Matrix};
use ntklab::model::{architecture, build_model, InitScheme, ModelState, Network, Phase};
use ntklab::ntk::{
    alignment, compute_entk, effective_rank, effective_rank_of, kernel_distance, ks_matrix, sym_eigvals, ClassKernel,
    KernelMode, KernelOptions, LabelSource, ProbeBatch,
};
use ntklab::theory::{self, AVariant, FKind};
use ntklab::train::{run_training, Trainer};
use ntklab::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq)]
enum Verdict {
    Pass,
    Fail,
    /// Failure of a criterion the acceptance list tolerates.
    SoftFail,
    NotRun,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome {
        verdict: if pass { Verdict::Pass } else { Verdict::Fail },
        detail,
    }
}

fn errored(e: impl std::fmt::Display) -> Outcome {
    Outcome {
        verdict: Verdict::Fail,
        detail: format!("error: {e}"),
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn central(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

// 1
fn gradient_correctness() -> ntklab::Result<Outcome> {
    const CASES: usize = 120;
    const H: f64 = 1e-6;
    let archs = ["linear", "mlp", "mlp-tanh", "mlp-bn", "tiny-cnn"];
    let mut worst: f64 = 0.0;
    let mut failed = 0;
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(case as u64);
        let arch = archs[case % archs.len()];
        let shape = if arch == "tiny-cnn" { [2, 4, 4] } else { [1, 3, 3] };
        let net = Network::new(architecture(arch, shape, 3, 4)?)?;
        let state = build_model(&net, InitScheme::Normal, case as u64)?;
        let batch = 3;
        let x = rand_tensor(&mut rng, vec![batch, shape[0], shape[1], shape[2]]);
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..3)).collect();
        let target: Vec<f64> = (0..batch * 3).map(|_| rng.random::<f64>()).collect();
        let loss = if case % 2 == 0 {
            Loss::CrossEntropy(&labels)
        } else {
            Loss::Mse(&target)
        };
        let phase = if (case / 2) % 2 == 0 { Phase::Train } else { Phase::Eval };

        let (_, gp) = grad_params(&net, &state, &x, loss, phase)?;
        let (_, gx) = grad_input(&net, &state, &x, loss, phase)?;
        let value = |s: &ModelState, x: &Tensor| grad_params(&net, s, x, loss, phase).map(|r| r.0);

        let mut diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for _ in 0..6 {
            let k = rng.random_range(0..gp.len());
            let fd = central(
                |h| {
                    let mut s = state.clone();
                    s.params.data_mut()[k] += h;
                    value(&s, &x).unwrap()
                },
                H,
            );
            diff = diff.max((gp.data()[k] - fd).abs());
            scale = scale.max(fd.abs());
        }
        for _ in 0..4 {
            let k = rng.random_range(0..x.numel());
            let fd = central(
                |h| {
                    let mut xp = x.clone();
                    xp.data_mut()[k] += h;
                    value(&state, &xp).unwrap()
                },
                H,
            );
            diff = diff.max((gx.data()[k] - fd).abs());
            scale = scale.max(fd.abs());
        }
        let rel = if scale > 0.0 { diff / scale } else { diff };
        worst = worst.max(rel);
        if rel >= 1e-5 {
            failed += 1;
        }
    }
    Ok(outcome(
        failed == 0,
        format!("{CASES} cases, {failed} above 1e-5, max relative error {worst:.2e}"),
    ))
}

// 2
fn entk_oracle() -> ntklab::Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for seed in 0..14u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let arch = if seed % 2 == 0 { "mlp" } else { "mlp-tanh" };
        let n = 2 + (seed as usize % 7);
        let net = Network::new(architecture(arch, [1, 3, 3], 4, 5)?)?;
        let state = build_model(&net, InitScheme::Normal, seed)?;
        let probe = ProbeBatch {
            x: rand_tensor(&mut rng, vec![n, 1, 3, 3]),
            labels: (0..n).map(|i| i % 4).collect(),
            ids: (0..n as u32).collect(),
        };
        let k = compute_entk(&net, &state, &probe, &KernelMode::Clean, &KernelOptions::default())?;
        // ∇f_i(x_a) one sample at a time, as the gradient of (f − t)² with
        // t = f − e_i/2.
        let mut grads = vec![vec![Vec::new(); n]; net.n_out()];
        for a in 0..n {
            let xa = probe.x.gather(&[a]);
            let f = net.forward(&state, &xa, Phase::Eval)?;
            for (i, g) in grads.iter_mut().enumerate() {
                let mut t = f.data().to_vec();
                t[i] -= 0.5;
                g[a] = grad_params(&net, &state, &xa, Loss::Mse(&t), Phase::Eval)?.1.data().to_vec();
            }
        }
        for (i, block) in k.blocks.iter().enumerate() {
            let oracle = Matrix::from_vec(n, n, (0..n * n).map(|e| dot(&grads[i][e / n], &grads[i][e % n])).collect());
            let scale = oracle.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let diff = block.data.iter().zip(&oracle.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst = worst.max(diff / scale);
        }
        cases += 1;
    }
    Ok(outcome(
        worst <= 1e-9,
        format!("{cases} random MLPs with N in 2..=8, max relative block error {worst:.2e} (<= 1e-9)"),
    ))
}

fn random_psd(n: usize, rank: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let v = Matrix::from_vec(n, rank, (0..n * rank).map(|_| rng.random::<f64>() - 0.5).collect());
    v.mul_transpose(&v)
}

// 3
fn metric_identities() -> ntklab::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tol = 1e-10;
    let mut fails = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            fails.push(name.to_string());
        }
    };

    let k = random_psd(12, 5, &mut rng);
    check("KD(K,K)=0", kernel_distance(&k, &k)?.abs() <= tol);
    check("KD scale invariance", {
        let other = random_psd(12, 12, &mut rng);
        (kernel_distance(&k, &k.scaled(3.7))?).abs() <= tol
            && (kernel_distance(&k, &other)? - kernel_distance(&k.scaled(0.01), &other.scaled(250.0))?).abs() <= tol
    });
    check("KER(I_50)=50", (effective_rank(&Matrix::identity(50))? - 50.0).abs() <= tol * 50.0);
    let v: Vec<f64> = (0..9).map(|_| rng.random::<f64>() + 0.1).collect();
    let rank1 = Matrix::from_vec(9, 9, (0..81).map(|e| v[e / 9] * v[e % 9]).collect());
    check("KER(rank-1)=1", (effective_rank(&rank1)? - 1.0).abs() <= tol);
    check("KER({2,1,1})=2^1.5", (effective_rank_of(&[2.0, 1.0, 1.0])? - 2f64.powf(1.5)).abs() <= tol);
    check(
        "KER(diag(2,1,1))=2^1.5",
        (effective_rank(&Matrix::diag(&[2.0, 1.0, 1.0]))? - 2f64.powf(1.5)).abs() <= tol,
    );
    for (n, c) in [(10usize, 3usize), (40, 7), (64, 64)] {
        let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= c)).collect();
        let a = alignment(&Matrix::identity(n), &labels, 0)?;
        check(&format!("alignment(I_{n}, c={c})"), (a - 1.0 / (n as f64).sqrt()).abs() <= tol);
    }
    let n = 15;
    let kernel = ClassKernel {
        blocks: (0..3).map(|_| random_psd(n, 6, &mut rng)).collect(),
        probe_ids: (0..n as u32).collect(),
        cl: (0..n).map(|i| (i % 3) as u16).collect(),
        al: None,
    };
    let m = ks_matrix(&kernel, LabelSource::Cl)?;
    for j in 0..3 {
        let mean = (0..3).map(|i| m.matrix.get(i, j)).sum::<f64>() / 3.0;
        check(&format!("ks column {j} mean"), (mean - 1.0).abs() <= tol);
    }
    Ok(outcome(
        fails.is_empty(),
        if fails.is_empty() {
            "KD, KER, alignment and KS identities hold to 1e-10".into()
        } else {
            format!("violated: {}", fails.join(", "))
        },
    ))
}

fn tiny_config(arch: &str, width: usize, extra: &str) -> ntklab::Result<ExperimentConfig> {
    parse_config_str(&format!(
        r#"
seed = 11

[data]
probe_size = 12

[data.synthetic]
classes = 3
train_per_class = 16
test_per_class = 8
shape = [3, 8, 8]

[model]
arch = "{arch}"
width = {width}

[train]
epochs = 10
decay_epochs = [5, 8]
batch_size = 16
eval_batch_size = 24

[eval_attack]
epsilon = 0.031
alpha = 0.01
steps = 3
random_start = true

{extra}
"#
    ))
}

// 4
fn psd_symmetry(scratch: &Path) -> ntklab::Result<Outcome> {
    let runs = [
        ("cnn", "tiny-cnn", 4, "[strategy]\nkind = \"pgd\"\nsteps = 3\n"),
        ("mlp", "mlp-bn", 8, "[strategy]\nkind = \"fgsm\"\n"),
    ];
    let mut checked = 0;
    let mut worst_asym: f64 = 0.0;
    let mut worst_neg: f64 = 0.0;
    for (name, arch, width, strategy) in runs {
        let cfg = tiny_config(arch, width, strategy)?;
        let dir = scratch.join(format!("psd-{name}"));
        experiment::cmd_train(&cfg, &dir)?;
        let (train, _) = cfg.datasets()?;
        let net = cfg.network(&train)?;
        let probe = experiment::probe_batch(&train, cfg.data.probe_size, cfg.seed)?;
        let mode = KernelMode::Adversarial {
            attack: cfg.train_config()?.kernel_attack(),
            seed: 5,
        };
        for epoch in 0..10 {
            let state = experiment::load_state(&net, &dir.join(format!("checkpoints/epoch_{epoch:03}.ckpt")))?;
            for m in [KernelMode::Clean, mode] {
                let k = compute_entk(&net, &state, &probe, &m, &KernelOptions::default())?;
                worst_asym = worst_asym.max(k.max_asymmetry());
                for b in &k.blocks {
                    let s = sym_eigvals(b)?;
                    worst_neg = worst_neg.max(-s.min() / s.max());
                }
            }
            checked += 1;
        }
    }
    Ok(outcome(
        worst_asym <= 1e-9 && worst_neg <= 1e-8,
        format!(
            "{checked} checkpoints, clean and adversarial kernels; max asymmetry {worst_asym:.2e} (<= 1e-9), max -λmin/λmax {worst_neg:.2e} (<= 1e-8)"
        ),
    ))
}

// 5
fn kernel_shift_check(scratch: &Path) -> ntklab::Result<Outcome> {
    let cfg = ExperimentConfig::default();
    let start = Instant::now();
    let r = experiment::check_thm1(&cfg, &scratch.join("thm1"))?;
    let secs = start.elapsed().as_secs_f64();
    let zero = r.epsilons.iter().position(|&e| e == 0.0).unwrap();
    let r0_exact = r.shift[zero] == 0.0 && r.per_trial.iter().all(|t| t[zero] == 0.0);
    let slope = r.slope.unwrap_or(f64::NAN);
    let pass = r0_exact && r.monotone && (0.8..=1.2).contains(&slope) && r.trials == 10 && secs < 600.0;
    Ok(outcome(
        pass,
        format!(
            "{} on {}, {} trials: r(0) exact zero {r0_exact}, monotone {}, slope {slope:.4} in [0.8, 1.2], {secs:.1} s (< 600 s)",
            cfg.check.thm1.arch, "synthetic 3x32x32", r.trials, r.monotone
        ),
    ))
}

// 6
fn normalization_bound_check(scratch: &Path) -> ntklab::Result<Outcome> {
    let cfg = ExperimentConfig::default();
    let s = &cfg.check.thm2;
    let start = Instant::now();
    let groups = experiment::check_thm2(&cfg, &scratch.join("thm2"))?;
    let secs = start.elapsed().as_secs_f64();
    let mut detail = Vec::new();
    let mut pass = (s.alpha, s.k, s.trials) == (32, 8, 1000) && secs < 60.0;
    for g in &groups {
        if g.variant == AVariant::ProofConsistent {
            pass &= g.violations == 0 && g.trials == 1000;
            detail.push(format!("proof-consistent {:?}: {} violations", g.f, g.violations));
        } else {
            detail.push(format!("statement {:?}: {} infeasible", g.f, g.infeasible));
        }
    }
    // the infeasibility flag agrees with E(A) on every Statement trial
    let mut flag_mismatch = 0;
    for f in [FKind::Identity, FKind::Tanh] {
        for r in theory::normalization_bound_trials(f, s.alpha, s.k, s.population, 200, cfg.seed, AVariant::Statement)? {
            if r.infeasible != (r.expected_a <= 0.0) || (r.infeasible && !r.elements.is_empty()) {
                flag_mismatch += 1;
            }
        }
    }
    // S¹ = 2, S² = 2 makes A = −2 under the stated definition
    let hand = theory::normalization_bound_on_subsets(FKind::Identity, &[vec![1.0, 1.0]], AVariant::Statement)?;
    pass &= flag_mismatch == 0 && hand.infeasible;
    detail.push(format!("statement flag mismatches {flag_mismatch}, A=-2 example flagged {}", hand.infeasible));
    detail.push(format!("{secs:.1} s (< 60 s)"));
    Ok(outcome(pass, detail.join("; ")))
}

// 8
fn cost_model() -> ntklab::Result<Outcome> {
    let base = "[train]\nepochs = 4\nbatch_size = 16\ndecay_epochs = [2]\nprobe_interval = 0\n[model]\narch = \"mlp\"\nwidth = 8\n";
    let grad_evals = |strategy: &str| -> ntklab::Result<u64> {
        let cfg = parse_config_str(&format!(
            "seed = 2\n[data.synthetic]\nclasses = 3\ntrain_per_class = 30\ntest_per_class = 4\nshape = [1, 6, 6]\n[eval_attack]\nepsilon = 0.03\nalpha = 0.03\nsteps = 1\nrandom_start = false\n{base}{strategy}"
        ))?;
        let (train, test) = cfg.datasets()?;
        let net = cfg.network(&train)?;
        let out = run_training(&net, &cfg.train_config()?, &train, &test, None, &mut ())?;
        Ok(out.rows.iter().map(|r| r.grad_evals).sum())
    };
    let switch = grad_evals("[strategy]\nkind = \"switch\"\ninner = \"pgd\"\nsteps = 10\nswitch_fraction = 0.5\n")?;
    let pgd = grad_evals("[strategy]\nkind = \"pgd\"\nsteps = 10\n")?;
    let measured = switch as f64 / pgd as f64;
    let expected = (0.5 + 0.5 * 11.0) / 11.0;
    let analytic = experiment::analytic_cost_ratio(100, 200, 10);
    let r100 = experiment::wallclock_ratio(100, 200, REFERENCE_CLEAN_EPOCH_SECONDS, REFERENCE_AT_EPOCH_SECONDS);
    let r140 = experiment::wallclock_ratio(140, 200, REFERENCE_CLEAN_EPOCH_SECONDS, REFERENCE_AT_EPOCH_SECONDS);
    let p100 = format!("{:.2}", experiment::truncated_percent(r100));
    let p140 = format!("{:.2}", experiment::truncated_percent(r140));
    let pass = ((measured - expected) / expected).abs() <= 0.005
        && relative_eq!(analytic, expected, max_relative = 1e-15)
        && r100 == (100.0 * 25.0 + 100.0 * 90.0) / 18000.0
        && r140 == (140.0 * 25.0 + 60.0 * 90.0) / 18000.0
        && p100 == "63.88"
        && p140 == "49.44";
    Ok(outcome(
        pass,
        format!(
            "measured {switch}/{pgd} = {measured:.6} vs {expected:.6} (within 0.5%), analytic {analytic:.6}; wall-clock {p100}% and {p140}%"
        ),
    ))
}

// 10, first half
fn batch_shared_augmentation() -> ntklab::Result<Outcome> {
    let cfg = parse_config_str(
        "seed = 4\n[data.synthetic]\nclasses = 4\ntrain_per_class = 50\ntest_per_class = 2\nshape = [3, 8, 8]\n\
         [model]\narch = \"linear\"\n[train]\nepochs = 4\ndecay_epochs = [2]\nbatch_size = 8\n[strategy]\nkind = \"te-of\"\nsteps = 2\n",
    )?;
    let (train, _) = cfg.datasets()?;
    let net = cfg.network(&train)?;
    let mut t = Trainer::new(&net, cfg.train_config()?, train.len())?;
    let (mut batches, mut shared) = (0, 0);
    let mut distinct = std::collections::HashSet::new();
    for epoch in 0..4 {
        t.train_epoch_observed(epoch, &train, &mut |ev| {
            batches += 1;
            if ev.augment.len() == ev.indices.len() && ev.augment.iter().all(|p| *p == ev.augment[0]) {
                shared += 1;
            }
            distinct.insert((ev.augment[0].dy, ev.augment[0].dx, ev.augment[0].flip));
        })?;
    }
    Ok(outcome(
        batches == 100 && shared == 100 && distinct.len() > 1,
        format!("{shared}/{batches} TE-OF batches share crop offset and flip; {} distinct draws across batches", distinct.len()),
    ))
}

// 11
fn determinism(scratch: &Path) -> ntklab::Result<Outcome> {
    let mut cfg = tiny_config("tiny-cnn", 4, "[strategy]\nkind = \"fgsm\"\n")?;
    cfg.train.epochs = Some(3);
    cfg.train.decay_epochs = Some(vec![2]);
    let a = scratch.join("det-a");
    let b = scratch.join("det-b");
    experiment::cmd_train(&cfg, &a)?;
    experiment::cmd_train(&cfg, &b)?;
    let mut files = vec![PathBuf::from("trace.csv")];
    let mut kernels: Vec<PathBuf> = std::fs::read_dir(a.join("kernels"))
        .map_err(|e| ntklab::Error::io(&a, e))?
        .map(|e| PathBuf::from("kernels").join(e.unwrap().file_name()))
        .collect();
    kernels.sort();
    let n_kernels = kernels.len();
    files.extend(kernels);
    let differing: Vec<String> = files
        .iter()
        .filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    Ok(outcome(
        differing.is_empty() && n_kernels == 6,
        format!("trace.csv and {n_kernels} kernel snapshots compared byte for byte; differing: {differing:?}"),
    ))
}

fn cifar_dir() -> Option<PathBuf> {
    std::env::var_os("NTKLAB_CIFAR_DIR").map(PathBuf::from)
}

fn not_run(what: &str) -> Outcome {
    Outcome {
        verdict: Verdict::NotRun,
        detail: format!("{what}; set NTKLAB_CIFAR_DIR to the CIFAR-10 binary batches to run it"),
    }
}

fn desk_config(dir: &Path, seed: u64, strategy: &str) -> ntklab::Result<ExperimentConfig> {
    parse_config_str(&format!(
        "profile = \"desk\"\nseed = {seed}\n[data]\nsource = \"cifar\"\ncifar_dir = {:?}\ntrain_size = 5000\nprobe_size = 200\n{strategy}",
        dir.display().to_string()
    ))
}

/// Lazy-window and decay-spike comparison on the clean-kernel KD trace.
fn threefold(kd: &[Option<f64>], first_decay: usize) -> (bool, f64, f64, f64) {
    let mean = |r: std::ops::Range<usize>| {
        let v: Vec<f64> = r.filter_map(|t| kd.get(t).copied().flatten()).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let early = mean(1..4);
    let lazy = mean(10..30);
    let spike = kd.get(first_decay).copied().flatten().unwrap_or(f64::NAN);
    (lazy < 0.5 * early && spike > 2.0 * lazy, early, lazy, spike)
}

// 7 and 9
fn desk_pgd(scratch: &Path, dir: &Path) -> ntklab::Result<(Outcome, Outcome)> {
    let mut seeds_ok = 0;
    let mut lines = Vec::new();
    let (mut dc, mut dr) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let cfg = desk_config(dir, seed, "[strategy]\nkind = \"pgd\"\n")?;
        let run = experiment::cmd_train(&cfg, &scratch.join(format!("desk-pgd-{seed}")))?;
        let kd: Vec<Option<f64>> = run.rows.iter().map(|r| r.kd_clean).collect();
        let first_decay = cfg.train_config()?.decay_epochs[0];
        let (ok, early, lazy, spike) = threefold(&kd, first_decay);
        seeds_ok += usize::from(ok);
        lines.push(format!("seed {seed}: early {early:.3e} lazy {lazy:.3e} decay {spike:.3e}"));
        if seed < 3 {
            let (train, test) = cfg.datasets()?;
            let net = cfg.network(&train)?;
            let state = experiment::load_state(&net, &run.dir.join(format!("checkpoints/epoch_{:03}.ckpt", run.rows.len() - 1)))?;
            let r = theory::proposition_buffer_swap(&net, &state, &test, &cfg.eval_attack, cfg.train.eval_batch_size, seed)?;
            dc.push(r.delta_clean);
            dr.push(r.delta_robust);
        }
    }
    let c = dc.iter().sum::<f64>() / 3.0;
    let r = dr.iter().sum::<f64>() / 3.0;
    Ok((
        outcome(seeds_ok >= 4, format!("{seeds_ok}/5 seeds pass (>= 4 required); {}", lines.join("; "))),
        outcome(r > c && r >= 2.0 * c, format!("mean Δrobust {r:.4}, mean Δclean {c:.4} over 3 seeds")),
    ))
}

// 10, second half
fn collapse(scratch: &Path, dir: &Path) -> ntklab::Result<Outcome> {
    let cfg = desk_config(dir, 0, "")?;
    let rows = experiment::case_overfit(&cfg, &scratch.join("desk-overfit"))?;
    let fired = |s: &str| rows.iter().filter(|r| r.strategy == s && r.collapse_epoch.is_some()).count();
    let single = fired("fgsm") + fired("te-of");
    let noise = fired("noise-fgsm");
    let ok = single >= 1 && noise == 0;
    Ok(Outcome {
        verdict: if ok { Verdict::Pass } else { Verdict::SoftFail },
        detail: format!("collapse on {single} FGSM-AT/TE-OF runs (>= 1), {noise} NoiseFGSM-AT runs (0) across 3 seeds"),
    })
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |id: &str, name: &str| {
        filters.is_empty() || filters.iter().any(|f| f == id || f.split('.').next() == Some(id) || name.contains(f.as_str()))
    };
    let scratch = tempfile::tempdir().expect("scratch directory");
    let s = scratch.path();
    let cifar = cifar_dir();

    type Check<'a> = Box<dyn Fn() -> ntklab::Result<Outcome> + 'a>;
    let criteria: Vec<(&str, &str, Check)> = vec![
        ("1", "gradient correctness", Box::new(gradient_correctness)),
        ("2", "ENTK oracle equivalence", Box::new(entk_oracle)),
        ("3", "metric identities", Box::new(metric_identities)),
        ("4", "PSD and symmetry", Box::new(|| psd_symmetry(s))),
        ("5", "kernel shift under input perturbation", Box::new(|| kernel_shift_check(s))),
        ("6", "normalization bound", Box::new(|| normalization_bound_check(s))),
        ("8", "cost model", Box::new(cost_model)),
        ("10a", "batch-shared augmentation", Box::new(batch_shared_augmentation)),
        ("11", "determinism", Box::new(|| determinism(s))),
    ];

    let mut results: Vec<(String, String, Outcome, f64)> = Vec::new();
    for (id, name, check) in &criteria {
        if !selected(id, name) {
            continue;
        }
        let t = Instant::now();
        let o = check().unwrap_or_else(errored);
        results.push((id.to_string(), name.to_string(), o, t.elapsed().as_secs_f64()));
    }
    if selected("7", "threefold evolution") || selected("9", "buffer swap") {
        let t = Instant::now();
        let (seven, nine) = match &cifar {
            Some(dir) => desk_pgd(s, dir).unwrap_or_else(|e| (errored(&e), errored(&e))),
            None => (not_run("desk-profile PGD-AT on CIFAR-10"), not_run("desk-profile PGD-AT on CIFAR-10")),
        };
        let secs = t.elapsed().as_secs_f64();
        results.push(("7".into(), "threefold evolution".into(), seven, secs));
        results.push(("9".into(), "buffer swap".into(), nine, 0.0));
    }
    if selected("10b", "catastrophic overfitting") {
        let t = Instant::now();
        let o = match &cifar {
            Some(dir) => collapse(s, dir).unwrap_or_else(errored),
            None => not_run("desk-profile single-step runs on CIFAR-10"),
        };
        results.push(("10b".into(), "catastrophic overfitting".into(), o, t.elapsed().as_secs_f64()));
    }

    results.sort_by_key(|r| (r.0.trim_end_matches(char::is_alphabetic).parse::<u32>().unwrap_or(0), r.0.clone()));
    let mut hard_failures = 0;
    for (id, name, o, secs) in &results {
        let tag = match o.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                hard_failures += 1;
                "FAIL"
            }
            Verdict::SoftFail => "SOFT-FAIL",
            Verdict::NotRun => "NOT RUN",
        };
        println!("criterion {id:>3} [{tag}] {name}: {} ({secs:.1} s)", o.detail);
    }
    if hard_failures > 0 {
        println!("{hard_failures} criteria failed");
        std::process::exit(1);
    }
}
