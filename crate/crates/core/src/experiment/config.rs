//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::data::{
    load_cifar_dir, sample_probe, synth_dataset, AugmentationConfig, Dataset, SynthConfig,
};
use crate::error::{Error, Result};
use crate::model::{architecture, BufferMode, InitScheme, Network};
use crate::theory::AVariant;
use crate::train::{Strategy, TeConfig, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 60 epochs, decays at 30 and 45.
    #[default]
    Desk,
    /// 200 epochs, decays at 100 and 150.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub strategy: StrategyConfig,
    pub augmentation: AugmentationConfig,
    pub te: TeConfig,
    pub eval_attack: AttackConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_attack: Option<AttackConfig>,
    pub check: CheckConfig,
    pub case: CaseConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            profile: Profile::Desk,
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            strategy: StrategyConfig::default(),
            augmentation: AugmentationConfig::default(),
            te: TeConfig::default(),
            eval_attack: AttackConfig::pgd(20),
            probe_attack: None,
            check: CheckConfig::default(),
            case: CaseConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Cifar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the CIFAR-10 binary batches.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cifar_dir: Option<PathBuf>,
    /// Class-stratified training subset size; the whole set when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_size: Option<usize>,
    pub probe_size: usize,
    pub synthetic: SyntheticSection,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            cifar_dir: None,
            train_size: None,
            test_size: None,
            probe_size: 200,
            synthetic: SyntheticSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSection {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub shape: [usize; 3],
    pub noise: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            classes: 10,
            train_per_class: 100,
            test_per_class: 20,
            shape: [3, 32, 32],
            noise: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub arch: String,
    pub width: usize,
    pub init: InitScheme,
    pub buffer_mode: BufferMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: "desk-cnn".into(),
            width: 16,
            init: InitScheme::Uniform,
            buffer_mode: BufferMode::WithBuffer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    /// Profile default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay_epochs: Option<Vec<usize>>,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub probe_interval: usize,
    pub eval_batch_size: usize,
    pub memory_limit_mb: usize,
    pub reset_momentum_at_switch: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: None,
            decay_epochs: None,
            batch_size: 128,
            lr0: 0.1,
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            probe_interval: 1,
            eval_batch_size: 128,
            memory_limit_mb: 1024,
            reset_momentum_at_switch: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    #[default]
    Normal,
    Fgsm,
    Pgd,
    Te,
    TeOf,
    NoiseFgsm,
    Switch,
}

/// Attack fields left out fall back to the strategy's usual attack: FGSM
/// with `α = ε` for `fgsm` and `noise-fgsm`, PGD-10 with `α = 2/255` and a
/// random start otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Strategy used from the switch epoch on.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner: Option<StrategyKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub switch_epoch: Option<usize>,
    /// Switch epoch as a fraction of the epoch count, rounded.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub switch_fraction: Option<f64>,
    pub epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub random_start: Option<bool>,
    /// Half-width of the uniform noise added before the FGSM step of
    /// `noise-fgsm`.
    pub noise: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            kind: StrategyKind::Normal,
            inner: None,
            switch_epoch: None,
            switch_fraction: None,
            epsilon: 8.0 / 255.0,
            alpha: None,
            steps: None,
            random_start: None,
            noise: 8.0 / 255.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckConfig {
    pub thm1: Thm1Section,
    pub thm2: Thm2Section,
    pub bn_buffer: BnBufferSection,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            thm1: Thm1Section::default(),
            thm2: Thm2Section::default(),
            bn_buffer: BnBufferSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thm1Section {
    pub arch: String,
    pub width: usize,
    pub init: InitScheme,
    pub probe_size: usize,
    pub trials: usize,
    pub epsilons: Vec<f64>,
    /// Evaluate a trained model instead of a fresh initialization.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for Thm1Section {
    fn default() -> Self {
        Thm1Section {
            arch: "mlp-tanh".into(),
            width: 64,
            init: InitScheme::Normal,
            probe_size: 20,
            trials: 10,
            epsilons: crate::theory::default_epsilons(),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thm2Section {
    pub alpha: usize,
    pub k: usize,
    /// Size of each trial's standard-normal population.
    pub population: usize,
    pub trials: usize,
    pub variants: Vec<AVariant>,
}

impl Default for Thm2Section {
    fn default() -> Self {
        Thm2Section {
            alpha: 32,
            k: 8,
            population: 512,
            trials: 1000,
            variants: vec![AVariant::ProofConsistent, AVariant::Statement],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BnBufferSection {
    /// Model to evaluate; a fresh initialization when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaseConfig {
    /// Switch epochs of the switch case, as fractions of the epoch count.
    pub switch_fractions: Vec<f64>,
    pub overfit_seeds: Vec<u64>,
    pub collapse_window: usize,
}

impl Default for CaseConfig {
    fn default() -> Self {
        CaseConfig {
            switch_fractions: vec![0.45, 0.5, 0.55, 0.7],
            overfit_seeds: vec![0, 1, 2],
            collapse_window: 5,
        }
    }
}

/// Parses and validates a configuration document. Every unknown key and
/// every invalid value is reported in one error.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
    let mut unknown = Vec::new();
    let cfg: ExperimentConfig = serde_ignored::deserialize(de, |path| unknown.push(format!("unknown key `{path}`")))
        .map_err(|e| Error::Config(vec![e.to_string()]))?;
    let mut problems = unknown;
    if let Err(e) = cfg.validate() {
        match e {
            Error::Config(p) => problems.extend(p),
            other => problems.push(other.to_string()),
        }
    }
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(problems))
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(p) => Error::Config(p.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
        other => other,
    })
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        match self.train_config() {
            Ok(t) => {
                if let Err(Error::Config(p)) = t.validate() {
                    problems.extend(p);
                }
            }
            Err(Error::Config(p)) => problems.extend(p),
            Err(e) => problems.push(e.to_string()),
        }
        if self.data.source == DataSource::Cifar && self.data.cifar_dir.is_none() {
            problems.push("data.cifar_dir is required for the cifar source".into());
        }
        if !crate::model::ARCHITECTURES.contains(&self.model.arch.as_str()) {
            problems.push(format!("model.arch `{}` is not one of {:?}", self.model.arch, crate::model::ARCHITECTURES));
        }
        if self.check.thm2.alpha < 2 {
            problems.push("check.thm2.alpha must be at least 2".into());
        }
        if self.check.thm2.k * self.check.thm2.alpha > self.check.thm2.population {
            problems.push("check.thm2: k·alpha exceeds the population size".into());
        }
        if self.case.switch_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            problems.push("case.switch_fractions must lie in [0, 1]".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn epochs(&self) -> usize {
        self.train.epochs.unwrap_or(match self.profile {
            Profile::Desk => 60,
            Profile::Paper => 200,
        })
    }

    fn attack_for(&self, kind: StrategyKind) -> AttackConfig {
        let s = &self.strategy;
        let (alpha, steps, random_start) = match kind {
            StrategyKind::Fgsm | StrategyKind::NoiseFgsm => (s.epsilon, 1, false),
            _ => (2.0 / 255.0, 10, true),
        };
        AttackConfig {
            epsilon: s.epsilon,
            alpha: s.alpha.unwrap_or(alpha),
            steps: s.steps.unwrap_or(steps),
            random_start: s.random_start.unwrap_or(random_start),
        }
    }

    fn simple_strategy(&self, kind: StrategyKind) -> Result<Strategy> {
        let a = self.attack_for(kind);
        Ok(match kind {
            StrategyKind::Normal => Strategy::Normal,
            StrategyKind::Fgsm => Strategy::FgsmAt(a),
            StrategyKind::Pgd => Strategy::PgdAt(a),
            StrategyKind::Te => Strategy::Te(a),
            StrategyKind::TeOf => Strategy::TeOf(a),
            StrategyKind::NoiseFgsm => Strategy::NoiseFgsmAt {
                attack: a,
                noise: self.strategy.noise,
            },
            StrategyKind::Switch => {
                return Err(Error::Config(vec!["strategy.inner cannot itself be `switch`".into()]));
            }
        })
    }

    pub fn strategy(&self) -> Result<Strategy> {
        let s = &self.strategy;
        if s.kind != StrategyKind::Switch {
            return self.simple_strategy(s.kind);
        }
        let epochs = self.epochs();
        let switch_epoch = match (s.switch_epoch, s.switch_fraction) {
            (Some(e), None) => e,
            (None, Some(f)) => (f * epochs as f64).round() as usize,
            (None, None) => epochs / 2,
            (Some(_), Some(_)) => {
                return Err(Error::Config(vec!["give strategy.switch_epoch or strategy.switch_fraction, not both".into()]))
            }
        };
        Ok(Strategy::SwitchAt {
            switch_epoch,
            inner: Box::new(self.simple_strategy(s.inner.unwrap_or(StrategyKind::Pgd))?),
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let strategy = self.strategy()?;
        let base = match self.profile {
            Profile::Desk => TrainConfig::desk(strategy),
            Profile::Paper => TrainConfig::paper(strategy),
        };
        let t = &self.train;
        Ok(TrainConfig {
            epochs: self.epochs(),
            decay_epochs: t.decay_epochs.clone().unwrap_or(base.decay_epochs.clone()),
            batch_size: t.batch_size,
            lr0: t.lr0,
            decay_factor: t.decay_factor,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            seed: self.seed,
            init: self.model.init,
            augmentation: self.augmentation,
            te: self.te.clone(),
            reset_momentum_at_switch: t.reset_momentum_at_switch,
            buffer_mode: self.model.buffer_mode,
            probe_interval: t.probe_interval,
            probe_attack: self.probe_attack,
            eval_attack: self.eval_attack,
            eval_batch_size: t.eval_batch_size,
            memory_limit: t.memory_limit_mb.saturating_mul(1 << 20),
            ..base
        })
    }

    /// Training and test sets, subset to the configured sizes.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.data.source {
            DataSource::Cifar => {
                let dir = self.data.cifar_dir.as_deref().ok_or_else(|| Error::Config(vec!["data.cifar_dir is required".into()]))?;
                load_cifar_dir(dir)?
            }
            DataSource::Synthetic => {
                let s = &self.data.synthetic;
                let all = synth_dataset(&SynthConfig {
                    class_count: s.classes,
                    per_class: s.train_per_class + s.test_per_class,
                    shape: s.shape,
                    noise: s.noise,
                    seed: self.seed,
                })?;
                let per = s.train_per_class + s.test_per_class;
                let (mut tr, mut te) = (Vec::new(), Vec::new());
                for c in 0..s.classes {
                    tr.extend(c * per..c * per + s.train_per_class);
                    te.extend(c * per + s.train_per_class..(c + 1) * per);
                }
                (all.subset(&tr), all.subset(&te))
            }
        };
        let cut = |ds: Dataset, n: Option<usize>, seed: u64| -> Result<Dataset> {
            match n {
                Some(n) if n < ds.len() => {
                    let mut idx = sample_probe(&ds, n, seed)?.indices().to_vec();
                    idx.sort_unstable();
                    Ok(ds.subset(&idx))
                }
                _ => Ok(ds),
            }
        };
        Ok((cut(train, self.data.train_size, self.seed)?, cut(test, self.data.test_size, self.seed ^ 1)?))
    }

    pub fn network(&self, ds: &Dataset) -> Result<Network> {
        Network::new(architecture(&self.model.arch, ds.image_shape(), ds.class_count, self.model.width)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format {
            what: "configuration echo",
            detail: e.to_string(),
        })
    }
}
