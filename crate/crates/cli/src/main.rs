//! `ntklab`: training runs, kernel metrics, theory checks and case studies.
//!
//! Exit status is 0 on success, 1 for invalid input (configuration, files,
//! arguments) and 2 when a computation fails numerically.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ntklab::experiment::{self, ExperimentConfig, MARGIN_TOLERANCE};
use ntklab::ntk::LabelSource;
use ntklab::theory::AVariant;
use ntklab::Error;

#[derive(Parser)]
#[command(name = "ntklab", version, about = "Empirical NTK analysis of adversarial training")]
struct Cli {
    /// Worker threads for attacks, evaluation and kernel assembly.
    #[arg(long, global = true, env = "NTKLAB_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing trace.csv, timing.csv, checkpoints/, kernels/,
    /// figures/, config.toml and seed.txt into the output directory.
    ///
    /// Strategies (`[strategy] kind`): normal, fgsm, pgd, te, te-of,
    /// noise-fgsm and switch. noise-fgsm adds uniform noise in
    /// [-noise, +noise] to every pixel before the FGSM step, then projects
    /// the result back into the epsilon-ball around the clean image. te-of
    /// is te with one crop offset and flip decision shared by the whole
    /// mini-batch. switch trains on clean data until the switch epoch and
    /// with `inner` afterwards.
    Train(RunArgs),
    /// Metrics of kernel snapshot files (.entk).
    Metrics {
        #[command(subcommand)]
        which: Metric,
    },
    /// Numerical checks of the kernel-shift result, the normalization bound
    /// and the batch-norm buffer swap.
    Check {
        which: CheckKind,
        #[command(flatten)]
        run: OptionalConfig,
    },
    /// Case studies: late switch to adversarial training, and catastrophic
    /// overfitting of single-step training (FGSM-AT, NoiseFGSM-AT, TE, TE-OF).
    Case {
        which: CaseKind,
        #[command(flatten)]
        run: OptionalConfig,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OptionalConfig {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Metric {
    /// Kernel distance between the traced kernels of two snapshots.
    Kd { a: PathBuf, b: PathBuf },
    /// Effective rank of a snapshot's traced kernel.
    Ker { a: PathBuf },
    /// Kernel specialization strength and matrix.
    Ks {
        a: PathBuf,
        #[arg(long, value_enum, default_value = "cl")]
        labels: Labels,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Labels {
    Cl,
    Al,
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckKind {
    Thm1,
    Thm2,
    BnBuffer,
}

#[derive(Clone, Copy, ValueEnum)]
enum CaseKind {
    Switch,
    Overfit,
}

fn load(config: Option<&PathBuf>) -> ntklab::Result<ExperimentConfig> {
    match config {
        Some(p) => experiment::parse_config(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> ntklab::Result<()> {
    match cli.command {
        Command::Train(a) => {
            let cfg = experiment::parse_config(&a.config)?;
            let s = experiment::cmd_train(&cfg, &a.out)?;
            if let Some(last) = s.rows.last() {
                println!(
                    "{} epochs; final test clean {:.4}, robust {:.4}; written to {}",
                    s.rows.len(),
                    last.test_clean_acc,
                    last.test_robust_acc,
                    s.dir.display()
                );
            }
        }
        Command::Metrics { which } => match which {
            Metric::Kd { a, b } => println!("{}", experiment::metric_kd(&a, &b)?),
            Metric::Ker { a } => println!("{}", experiment::metric_ker(&a)?),
            Metric::Ks { a, labels } => {
                let source = match labels {
                    Labels::Cl => LabelSource::Cl,
                    Labels::Al => LabelSource::Al,
                };
                let (ks, m) = experiment::metric_ks(&a, source)?;
                println!("ks,{ks}");
                if !m.dropped.is_empty() {
                    let d: Vec<String> = m.dropped.iter().map(|c| c.to_string()).collect();
                    println!("dropped,{}", d.join(" "));
                }
                for i in 0..m.matrix.rows {
                    let row: Vec<String> = m.matrix.row(i).iter().map(|v| v.to_string()).collect();
                    println!("{}", row.join(","));
                }
            }
        },
        Command::Check { which, run } => {
            let cfg = load(run.config.as_ref())?;
            match which {
                CheckKind::Thm1 => {
                    let r = experiment::check_thm1(&cfg, &run.out)?;
                    for (e, s) in r.epsilons.iter().zip(&r.shift) {
                        println!("epsilon {:.6}: mean shift {s:.6e}", e);
                    }
                    println!(
                        "slope: {}",
                        r.slope.map_or("undefined".to_string(), |s| format!("{s:.4}"))
                    );
                    println!("monotone: {}", r.monotone);
                }
                CheckKind::Thm2 => {
                    let groups = experiment::check_thm2(&cfg, &run.out)?;
                    let mut proof_violations = 0;
                    for g in &groups {
                        println!(
                            "{:?} {:?}: trials {}, infeasible {}, violations {} (margin < {MARGIN_TOLERANCE:e})",
                            g.variant, g.f, g.trials, g.infeasible, g.violations
                        );
                        if g.variant == AVariant::ProofConsistent {
                            proof_violations += g.violations;
                        }
                    }
                    println!("violations: {proof_violations}");
                }
                CheckKind::BnBuffer => {
                    let r = experiment::check_bn_buffer(&cfg, &run.out)?;
                    println!("clean: with {:.4}, without {:.4}, gap {:+.4}", r.clean_with, r.clean_without, r.delta_clean);
                    println!("robust: with {:.4}, without {:.4}, gap {:+.4}", r.robust_with, r.robust_without, r.delta_robust);
                }
            }
        }
        Command::Case { which, run } => {
            let cfg = load(run.config.as_ref())?;
            match which {
                CaseKind::Switch => {
                    for r in experiment::case_switch(&cfg, &run.out)? {
                        println!(
                            "{}: clean {:.4}, robust {:.4}, cost {:.4}, kd {:.6}",
                            r.label, r.test_clean_acc, r.test_robust_acc, r.cost_ratio, r.kd_to_baseline
                        );
                    }
                }
                CaseKind::Overfit => {
                    for r in experiment::case_overfit(&cfg, &run.out)? {
                        println!(
                            "{} seed {}: final robust {:.4}, collapse {}",
                            r.strategy,
                            r.seed,
                            r.final_robust_acc,
                            r.collapse_epoch.map_or("none".to_string(), |e| format!("at epoch {e}"))
                        );
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} workers: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        2
    } else {
        1
    }
}
