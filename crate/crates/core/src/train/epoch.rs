//! One pass over the shuffled training set.

use crate::attack::{eval_batches, fgsm, generate};
use crate::data::{add_anisotropic_noise, augment, shuffled_indices, AugmentMode, AugmentParams, Dataset};
use crate::error::{Error, Result};
use crate::model::{build_model, GradTargets, ModelState, Network, Phase, StatsSource};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;
use crate::train::te::attach_te_loss;
use crate::train::{lr_at_epoch, te_weight, Sgd, Strategy, TeState, TrainConfig};

/// What happened to one mini-batch, for instrumentation.
#[derive(Clone, Debug)]
pub struct BatchEvent<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub indices: &'a [usize],
    pub augment: &'a [AugmentParams],
    /// Gradient evaluations spent on this batch, attack included.
    pub grad_evals: u64,
    pub attacked: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean training loss on the inputs actually trained on.
    pub loss: f64,
    /// Accuracy of the pre-step predictions on those inputs.
    pub accuracy: f64,
    pub grad_evals: u64,
    pub batches: usize,
}

/// Model, optimizer and temporal-ensembling state for one training run.
pub struct Trainer<'a> {
    pub net: &'a Network,
    pub cfg: TrainConfig,
    pub state: ModelState,
    pub sgd: Sgd,
    pub te: Option<TeState>,
}

impl<'a> Trainer<'a> {
    pub fn new(net: &'a Network, cfg: TrainConfig, train_size: usize) -> Result<Self> {
        cfg.validate()?;
        let mut state = build_model(net, cfg.init, cfg.seed)?;
        state.set_buffer_mode(cfg.buffer_mode);
        let sgd = Sgd::new(net.param_count(), cfg.momentum, cfg.weight_decay);
        let te = uses_te(&cfg.strategy).then(|| TeState::new(train_size, net.n_out(), cfg.te.ema));
        Ok(Trainer {
            net,
            cfg,
            state,
            sgd,
            te,
        })
    }

    pub fn train_epoch(&mut self, epoch: usize, ds: &Dataset) -> Result<EpochStats> {
        self.train_epoch_observed(epoch, ds, &mut |_| {})
    }

    pub fn train_epoch_observed(&mut self, epoch: usize, ds: &Dataset, observer: &mut dyn FnMut(&BatchEvent<'_>)) -> Result<EpochStats> {
        if ds.is_empty() {
            return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
        }
        if self.te.as_ref().is_some_and(|t| t.len() != ds.len()) {
            return Err(Error::InvalidArgument("training set size changed under temporal ensembling".into()));
        }
        if let Strategy::SwitchAt { switch_epoch, .. } = self.cfg.strategy {
            if epoch == switch_epoch && self.cfg.reset_momentum_at_switch {
                self.sgd.reset();
            }
        }
        let strategy = self.cfg.strategy.active(epoch).clone();
        let lr = lr_at_epoch(&self.cfg, epoch);
        let te_w = te_weight(self.cfg.te.w_max, epoch, self.cfg.te_rampup());
        let mut aug_cfg = self.cfg.augmentation;
        if matches!(strategy, Strategy::TeOf(_)) {
            aug_cfg.mode = AugmentMode::BatchShared;
        }
        let seed = self.cfg.seed;
        let mut aug_rng = rng::indexed(seed, Purpose::Augment, epoch as u64);
        let mut attack_rng = rng::indexed(seed, Purpose::Attack, epoch as u64);

        let perm = shuffled_indices(ds.len(), seed, epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut evals = 0u64;
        let batches = eval_batches(perm.len(), self.cfg.batch_size);
        for (b, range) in batches.iter().enumerate() {
            let ids = &perm[range.clone()];
            let labels: Vec<usize> = ids.iter().map(|&i| ds.labels[i]).collect();
            let (x, aug) = augment(&ds.images.gather(ids), &aug_cfg, &mut aug_rng);

            let (x, attack_evals) = match &strategy {
                Strategy::Normal => (x, 0),
                Strategy::NoiseFgsmAt { attack, noise } => {
                    let noisy = add_anisotropic_noise(&x, *noise, &mut attack_rng)?;
                    let stepped = fgsm(self.net, &self.state, &noisy, &labels, attack, Phase::Train)?;
                    (project(&stepped, &x, attack.epsilon)?, 1)
                }
                s => {
                    let attack = s.attack().expect("adversarial strategy");
                    let adv = generate(self.net, &self.state, &x, &labels, attack, Phase::Train, &mut attack_rng)?;
                    (adv, attack.steps as u64)
                }
            };

            let mut rec = self.net.record(
                &self.state,
                x,
                StatsSource::Phase(Phase::Train),
                GradTargets {
                    params: true,
                    input: false,
                },
            )?;
            let root = match (&self.te, strategy.uses_te()) {
                (Some(te), true) => attach_te_loss(&mut rec.tape, rec.logits, &labels, ids, te, te_w)?,
                _ => rec.tape.softmax_cross_entropy(rec.logits, &labels)?,
            };
            let loss = rec.tape.value(root).item();
            if !loss.is_finite() {
                return Err(Error::NumericFault { op: "training loss" });
            }
            let grads = rec.tape.backward(root, &[1.0])?;
            let mut g = vec![0.0; self.net.param_count()];
            rec.gather_param_grads(&grads, self.net.layout(), &mut g);

            let logits = rec.tape.value(rec.logits).clone();
            correct += logits.argmax_rows().iter().zip(&labels).filter(|(p, l)| p == l).count();
            loss_sum += loss * ids.len() as f64;

            self.sgd.step(self.state.params.data_mut(), &g, lr)?;
            self.net.update_buffers(&mut self.state, &rec)?;
            if let (Some(te), true) = (self.te.as_mut(), strategy.uses_te()) {
                te.update(ids, &logits);
            }

            let batch_evals = attack_evals + 1;
            evals += batch_evals;
            observer(&BatchEvent {
                epoch,
                batch: b,
                indices: ids,
                augment: &aug,
                grad_evals: batch_evals,
                attacked: attack_evals > 0,
            });
        }
        Ok(EpochStats {
            epoch,
            lr,
            loss: loss_sum / perm.len() as f64,
            accuracy: correct as f64 / perm.len() as f64,
            grad_evals: evals,
            batches: batches.len(),
        })
    }
}

fn uses_te(s: &Strategy) -> bool {
    match s {
        Strategy::SwitchAt { inner, .. } => inner.uses_te(),
        s => s.uses_te(),
    }
}

/// Projects `x` into the l∞ ball of radius `eps` around `center`, then clips to `[0, 1]`.
fn project(x: &Tensor, center: &Tensor, eps: f64) -> Result<Tensor> {
    let data = x
        .data()
        .iter()
        .zip(center.data())
        .map(|(&v, &c)| v.clamp(c - eps, c + eps).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackConfig;
    use crate::data::{synth_dataset, AugmentationConfig, SynthConfig};
    use crate::model::architecture;

    fn setup(per_class: usize) -> (Network, Dataset) {
        let ds = synth_dataset(&SynthConfig::new(3, per_class, [1, 6, 6], 4)).unwrap();
        let net = Network::new(architecture("mlp-bn", [1, 6, 6], 3, 8).unwrap()).unwrap();
        (net, ds)
    }

    fn cfg(strategy: Strategy, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            decay_epochs: vec![],
            probe_interval: 0,
            ..TrainConfig::desk(strategy)
        }
    }

    fn epoch_evals(strategy: Strategy, epochs: usize, m: usize) -> Vec<u64> {
        let (net, ds) = setup(m / 3);
        let mut t = Trainer::new(&net, cfg(strategy, epochs), ds.len()).unwrap();
        (0..epochs).map(|e| t.train_epoch(e, &ds).unwrap().grad_evals).collect()
    }

    #[test]
    fn grad_eval_counts() {
        // 30 samples in batches of 8 → 4 batches
        assert_eq!(epoch_evals(Strategy::Normal, 1, 30), vec![4]);
        assert_eq!(epoch_evals(Strategy::FgsmAt(AttackConfig::fgsm()), 1, 30), vec![8]);
        assert_eq!(epoch_evals(Strategy::PgdAt(AttackConfig::pgd(3)), 1, 30), vec![16]);
        let noise = Strategy::NoiseFgsmAt {
            attack: AttackConfig::fgsm(),
            noise: 8.0 / 255.0,
        };
        assert_eq!(epoch_evals(noise, 1, 30), vec![8]);
        let switch = Strategy::SwitchAt {
            switch_epoch: 2,
            inner: Box::new(Strategy::PgdAt(AttackConfig::pgd(10))),
        };
        assert_eq!(epoch_evals(switch, 4, 30), vec![4, 4, 44, 44]);
    }

    #[test]
    fn normal_training_never_attacks() {
        let (net, ds) = setup(10);
        let mut t = Trainer::new(&net, cfg(Strategy::Normal, 1), ds.len()).unwrap();
        let mut attacked = 0;
        t.train_epoch_observed(0, &ds, &mut |e| attacked += e.attacked as usize).unwrap();
        assert_eq!(attacked, 0);
    }

    #[test]
    fn te_of_batches_share_augmentation() {
        let (net, ds) = setup(10);
        let mut c = cfg(Strategy::TeOf(AttackConfig::pgd(2)), 2);
        c.augmentation = AugmentationConfig {
            crop_pad: 2,
            ..AugmentationConfig::default()
        };
        let mut t = Trainer::new(&net, c, ds.len()).unwrap();
        let mut checked = 0;
        for e in 0..2 {
            t.train_epoch_observed(e, &ds, &mut |ev| {
                assert!(ev.augment.iter().all(|p| *p == ev.augment[0]));
                checked += 1;
            })
            .unwrap();
        }
        assert_eq!(checked, 8);
    }

    #[test]
    fn per_sample_augmentation_varies() {
        let (net, ds) = setup(10);
        let mut c = cfg(Strategy::Te(AttackConfig::pgd(1)), 1);
        c.augmentation.crop_pad = 2;
        let mut t = Trainer::new(&net, c, ds.len()).unwrap();
        let mut varied = false;
        t.train_epoch_observed(0, &ds, &mut |ev| varied |= ev.augment.iter().any(|p| *p != ev.augment[0]))
            .unwrap();
        assert!(varied);
    }

    #[test]
    fn switch_matches_normal_before_switch() {
        let (net, ds) = setup(8);
        let switch = Strategy::SwitchAt {
            switch_epoch: 2,
            inner: Box::new(Strategy::PgdAt(AttackConfig::pgd(2))),
        };
        let mut a = Trainer::new(&net, cfg(Strategy::Normal, 3), ds.len()).unwrap();
        let mut b = Trainer::new(&net, cfg(switch, 3), ds.len()).unwrap();
        for e in 0..2 {
            assert_eq!(a.train_epoch(e, &ds).unwrap(), b.train_epoch(e, &ds).unwrap());
            assert_eq!(a.state, b.state);
        }
        a.train_epoch(2, &ds).unwrap();
        b.train_epoch(2, &ds).unwrap();
        assert_ne!(a.state, b.state);
    }

    #[test]
    fn training_reduces_loss() {
        let (net, ds) = setup(10);
        let mut c = cfg(Strategy::Normal, 15);
        c.augmentation = AugmentationConfig::identity();
        c.lr0 = 0.05;
        let mut t = Trainer::new(&net, c, ds.len()).unwrap();
        let first = t.train_epoch(0, &ds).unwrap().loss;
        let mut last = first;
        for e in 1..15 {
            last = t.train_epoch(e, &ds).unwrap().loss;
            assert!(last.is_finite());
        }
        assert!(last < 0.7 * first, "{first} → {last}");
    }

    #[test]
    fn noise_fgsm_stays_in_ball() {
        let x = Tensor::new(vec![1, 1, 1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        let far = Tensor::new(vec![1, 1, 1, 3], vec![0.3, 0.1, 0.2]).unwrap();
        let p = project(&far, &x, 0.1).unwrap();
        assert_eq!(p.data(), &[0.1, 0.4, 0.9]);
    }

    #[test]
    fn momentum_reset_flag() {
        let (net, ds) = setup(8);
        let switch = Strategy::SwitchAt {
            switch_epoch: 1,
            inner: Box::new(Strategy::FgsmAt(AttackConfig::fgsm())),
        };
        let mut c = cfg(switch, 2);
        c.reset_momentum_at_switch = true;
        let mut t = Trainer::new(&net, c.clone(), ds.len()).unwrap();
        t.train_epoch(0, &ds).unwrap();
        let mut kept = Trainer::new(&net, TrainConfig { reset_momentum_at_switch: false, ..c }, ds.len()).unwrap();
        kept.train_epoch(0, &ds).unwrap();
        assert_eq!(t.state, kept.state);
        t.train_epoch(1, &ds).unwrap();
        kept.train_epoch(1, &ds).unwrap();
        assert_ne!(t.state, kept.state);
    }
}
