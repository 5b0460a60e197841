//! SGD training with the clean, adversarial, temporal-ensembling and
//! switch-at-epoch strategies.

mod epoch;
mod run;
mod te;

pub use epoch::{BatchEvent, EpochStats, Trainer};
pub use run::{detect_collapse, epoch_seed, is_snapshot_epoch, run_training, MemorySink, RunOutput, RunSink, TraceRow};
pub use te::{te_loss, te_weight, TeConfig, TeState};

use crate::attack::AttackConfig;
use crate::data::AugmentationConfig;
use crate::error::{Error, Result};
use crate::model::{BufferMode, InitScheme};
use crate::ntk::DEFAULT_MEMORY_LIMIT;

/// What a training step feeds the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub enum Strategy {
    Normal,
    FgsmAt(AttackConfig),
    PgdAt(AttackConfig),
    /// PGD adversarial training plus the temporal-ensembling consistency term.
    Te(AttackConfig),
    /// `Te` with one augmentation draw shared by the whole mini-batch.
    TeOf(AttackConfig),
    /// FGSM started from a uniformly noised copy of the batch; the result is
    /// projected back into the ε-ball around the clean batch.
    NoiseFgsmAt { attack: AttackConfig, noise: f64 },
    /// Clean training before `switch_epoch`, `inner` from then on.
    SwitchAt { switch_epoch: usize, inner: Box<Strategy> },
}

impl Strategy {
    pub fn name(&self) -> String {
        match self {
            Strategy::Normal => "normal".into(),
            Strategy::FgsmAt(_) => "fgsm".into(),
            Strategy::PgdAt(_) => "pgd".into(),
            Strategy::Te(_) => "te".into(),
            Strategy::TeOf(_) => "te-of".into(),
            Strategy::NoiseFgsmAt { .. } => "noise-fgsm".into(),
            Strategy::SwitchAt { switch_epoch, inner } => format!("switch-{}-{switch_epoch}", inner.name()),
        }
    }

    /// The strategy in force at `epoch`.
    pub fn active(&self, epoch: usize) -> &Strategy {
        match self {
            Strategy::SwitchAt { switch_epoch, .. } if epoch < *switch_epoch => &Strategy::Normal,
            Strategy::SwitchAt { inner, .. } => inner,
            s => s,
        }
    }

    /// The attack used to build training batches, if any. For `SwitchAt`
    /// this is the inner strategy's attack.
    pub fn attack(&self) -> Option<&AttackConfig> {
        match self {
            Strategy::Normal => None,
            Strategy::FgsmAt(a) | Strategy::PgdAt(a) | Strategy::Te(a) | Strategy::TeOf(a) => Some(a),
            Strategy::NoiseFgsmAt { attack, .. } => Some(attack),
            Strategy::SwitchAt { inner, .. } => inner.attack(),
        }
    }

    pub fn uses_te(&self) -> bool {
        matches!(self, Strategy::Te(_) | Strategy::TeOf(_))
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        match self {
            Strategy::SwitchAt { switch_epoch, inner } => {
                if matches!(**inner, Strategy::Normal | Strategy::SwitchAt { .. }) {
                    return Err(Error::InvalidArgument(
                        "switch strategy needs an adversarial inner strategy".into(),
                    ));
                }
                if *switch_epoch > epochs {
                    return Err(Error::InvalidArgument(format!(
                        "switch epoch {switch_epoch} is beyond the {epochs} training epochs"
                    )));
                }
                inner.validate(epochs)
            }
            Strategy::NoiseFgsmAt { attack, noise } => {
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return Err(Error::InvalidArgument(format!("noise budget {noise} must be finite and ≥ 0")));
                }
                attack.validate()
            }
            s => s.attack().map_or(Ok(()), |a| a.validate()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub init: InitScheme,
    pub strategy: Strategy,
    pub augmentation: AugmentationConfig,
    pub te: TeConfig,
    /// Clear the optimizer velocity when a switch strategy changes mode.
    pub reset_momentum_at_switch: bool,
    pub buffer_mode: BufferMode,
    /// Epochs between kernel snapshots; 0 disables kernels.
    pub probe_interval: usize,
    /// Attack for the adversarial kernel; defaults to the training attack,
    /// or PGD-10 for clean training.
    pub probe_attack: Option<AttackConfig>,
    /// Attack for test robust accuracy.
    pub eval_attack: AttackConfig,
    pub eval_batch_size: usize,
    pub memory_limit: usize,
}

impl TrainConfig {
    /// 60 epochs with decays at 30 and 45.
    pub fn desk(strategy: Strategy) -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 128,
            lr0: 0.1,
            decay_epochs: vec![30, 45],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            init: InitScheme::Uniform,
            strategy,
            augmentation: AugmentationConfig::default(),
            te: TeConfig::default(),
            reset_momentum_at_switch: false,
            buffer_mode: BufferMode::WithBuffer,
            probe_interval: 1,
            probe_attack: None,
            eval_attack: AttackConfig::pgd(20),
            eval_batch_size: 128,
            memory_limit: DEFAULT_MEMORY_LIMIT,
        }
    }

    /// 200 epochs with decays at 100 and 150.
    pub fn paper(strategy: Strategy) -> Self {
        TrainConfig {
            epochs: 200,
            decay_epochs: vec![100, 150],
            ..TrainConfig::desk(strategy)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            problems.push(format!("decay_epochs {:?} must be strictly increasing", self.decay_epochs));
        }
        if self.decay_epochs.last().is_some_and(|&d| d >= self.epochs) {
            problems.push(format!("decay_epochs {:?} must lie below epochs = {}", self.decay_epochs, self.epochs));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            problems.push(format!("lr0 {} must be positive", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if let Err(e) = self.strategy.validate(self.epochs) {
            problems.push(e.to_string());
        }
        for (name, a) in [("probe_attack", self.probe_attack.as_ref()), ("eval_attack", Some(&self.eval_attack))] {
            if let Some(Err(e)) = a.map(|a| a.validate()) {
                problems.push(format!("{name}: {e}"));
            }
        }
        if let Err(e) = self.augmentation.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.te.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Attack used for the adversarial kernel.
    pub fn kernel_attack(&self) -> AttackConfig {
        self.probe_attack
            .or_else(|| self.strategy.attack().copied())
            .unwrap_or_else(|| AttackConfig::pgd(10))
    }

    /// Length of the consistency-weight ramp.
    pub fn te_rampup(&self) -> usize {
        self.te
            .rampup
            .unwrap_or_else(|| self.decay_epochs.first().copied().unwrap_or(self.epochs))
    }
}

/// `lr0 · decay^{#(decay epochs ≤ t)}`.
pub fn lr_at_epoch(cfg: &TrainConfig, t: usize) -> f64 {
    let k = cfg.decay_epochs.iter().filter(|&&d| d <= t).count();
    cfg.lr0 * cfg.decay_factor.powi(k as i32)
}

/// Momentum SGD with coupled weight decay:
/// `v ← m·v + g + wd·θ`, `θ ← θ − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(p: usize, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: vec![0.0; p],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::shape("sgd", format!("{} params, {} grads", params.len(), grads.len())));
        }
        for ((v, theta), g) in self.velocity.iter_mut().zip(params.iter_mut()).zip(grads) {
            *v = self.momentum * *v + g + self.weight_decay * *theta;
            *theta -= lr * *v;
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault { op: "sgd step" });
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.velocity.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps() {
        let cfg = TrainConfig::paper(Strategy::Normal);
        assert_eq!(lr_at_epoch(&cfg, 50), 0.1);
        assert!((lr_at_epoch(&cfg, 120) - 0.01).abs() < 1e-15);
        assert!((lr_at_epoch(&cfg, 180) - 0.001).abs() < 1e-15);
        assert!((lr_at_epoch(&cfg, 100) - 0.01).abs() < 1e-15);
        let desk = TrainConfig::desk(Strategy::Normal);
        assert!((lr_at_epoch(&desk, 45) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn sgd_examples() {
        let mut s = Sgd::new(1, 0.0, 0.0);
        let mut theta = [0.0];
        s.step(&mut theta, &[1.0], 0.1).unwrap();
        assert_eq!(theta, [-0.1]);

        let mut s = Sgd::new(1, 0.9, 0.0);
        let mut theta = [0.3];
        s.step(&mut theta, &[0.0], 0.1).unwrap();
        assert_eq!(theta, [0.3]);

        // v1 = 1, v2 = 0.9 + 1 = 1.9
        let mut s = Sgd::new(1, 0.9, 0.0);
        let mut theta = [0.0];
        s.step(&mut theta, &[1.0], 1.0).unwrap();
        s.step(&mut theta, &[1.0], 1.0).unwrap();
        assert!((theta[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_enters_velocity() {
        let mut s = Sgd::new(1, 0.0, 0.5);
        let mut theta = [2.0];
        s.step(&mut theta, &[0.0], 0.1).unwrap();
        assert!((theta[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn switch_dispatch() {
        let s = Strategy::SwitchAt {
            switch_epoch: 3,
            inner: Box::new(Strategy::PgdAt(AttackConfig::pgd(10))),
        };
        assert_eq!(s.active(2), &Strategy::Normal);
        assert!(matches!(s.active(3), Strategy::PgdAt(_)));
        assert_eq!(s.attack().unwrap().steps, 10);
        assert!(s.validate(10).is_ok());
        let bad = Strategy::SwitchAt {
            switch_epoch: 3,
            inner: Box::new(Strategy::Normal),
        };
        assert!(bad.validate(10).is_err());
    }

    #[test]
    fn config_validation_collects_problems() {
        let mut cfg = TrainConfig::paper(Strategy::Normal);
        cfg.decay_epochs = vec![150, 100];
        cfg.batch_size = 0;
        match cfg.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 2, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kernel_attack_defaults() {
        assert_eq!(TrainConfig::desk(Strategy::Normal).kernel_attack(), AttackConfig::pgd(10));
        assert_eq!(TrainConfig::desk(Strategy::FgsmAt(AttackConfig::fgsm())).kernel_attack(), AttackConfig::fgsm());
    }
}
