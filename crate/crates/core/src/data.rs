//! Datasets, probe sampling, augmentation and noise injection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_CLASSES: usize = 10;

/// Labelled images `[M, C, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.ndim() != 4 || images.batch() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} labels for images {:?}", labels.len(), images.shape()),
            ));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidArgument(format!("label {l} outside {class_count} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("image values must lie in [0, 1]".into()));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Parses CIFAR-10 binary records: one label byte followed by the R, G and
/// B planes of a 32×32 image.
pub fn parse_cifar_binary(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            what: "CIFAR-10 binary",
            detail: format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let m = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(m);
    let mut data = Vec::with_capacity(m * (CIFAR_RECORD - 1));
    for (k, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::Format {
                what: "CIFAR-10 binary",
                detail: format!("record {k} has label byte {}", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Tensor::new(vec![m, 3, CIFAR_SIDE, CIFAR_SIDE], data)?;
    Ok(Dataset {
        images,
        labels,
        class_count: CIFAR_CLASSES,
    })
}

pub fn load_cifar_binary(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_binary(&bytes).map_err(|e| match e {
        Error::Format { what, detail } => Error::Format {
            what,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from a CIFAR-10
/// binary directory. Missing training batches are skipped as long as at
/// least one is present.
pub fn load_cifar_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut parts = Vec::new();
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        if p.exists() {
            parts.push(load_cifar_binary(&p)?);
        }
    }
    if parts.is_empty() {
        return Err(Error::io(
            dir.join("data_batch_1.bin"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no CIFAR-10 training batches"),
        ));
    }
    let train = concat(&parts)?;
    let test = load_cifar_binary(&dir.join("test_batch.bin"))?;
    Ok((train, test))
}

pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
    let shape = first.image_shape();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        if p.image_shape() != shape || p.class_count != first.class_count {
            return Err(Error::shape("concat", "datasets disagree on image shape or classes"));
        }
        data.extend_from_slice(p.images.data());
        labels.extend_from_slice(&p.labels);
    }
    let images = Tensor::new(vec![labels.len(), shape[0], shape[1], shape[2]], data)?;
    Dataset::new(images, labels, first.class_count)
}

/// Serializes a 3×32×32 dataset with at most ten classes as CIFAR-10
/// records; pixels are rounded to the nearest byte.
pub fn encode_cifar_binary(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.image_shape() != [3, CIFAR_SIDE, CIFAR_SIDE] || ds.class_count > CIFAR_CLASSES {
        return Err(Error::shape("cifar", "records hold 3×32×32 images with at most ten classes"));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (i, &label) in ds.labels.iter().enumerate() {
        out.push(label as u8);
        out.extend(ds.images.sample(i).iter().map(|v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn write_cifar_binary(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_cifar_binary(ds)?).map_err(|e| Error::io(path, e))
}

/// Class-conditional Gaussian-blob images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub class_count: usize,
    pub per_class: usize,
    /// `[C, H, W]`
    pub shape: [usize; 3],
    /// Standard deviation of the per-pixel Gaussian noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.1
}

impl SynthConfig {
    pub fn new(class_count: usize, per_class: usize, shape: [usize; 3], seed: u64) -> Self {
        SynthConfig {
            class_count,
            per_class,
            shape,
            noise: default_noise(),
            seed,
        }
    }
}

/// Per-class prototypes: a Gaussian bump of random position and colour on a
/// dim background.
pub fn synth_prototypes(class_count: usize, shape: [usize; 3], seed: u64) -> Vec<Vec<f64>> {
    let [c, h, w] = shape;
    let mut rng = rng::stream(seed, rng::Purpose::Data);
    let sigma = (h.max(w) as f64 / 4.0).max(0.5);
    (0..class_count)
        .map(|_| {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let colour: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..1.0)).collect();
            let mut img = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        img[(ch * h + y) * w + x] = 0.1 + 0.8 * colour[ch] * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
            img
        })
        .collect()
}

/// Balanced synthetic dataset, class-major order, values clipped to `[0, 1]`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.class_count == 0 || cfg.per_class == 0 || cfg.shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument("synthetic dataset dimensions must be positive".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::InvalidArgument("noise must be a finite non-negative number".into()));
    }
    let protos = synth_prototypes(cfg.class_count, cfg.shape, cfg.seed);
    let mut rng = rng::indexed(cfg.seed, rng::Purpose::Data, 1);
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let len = cfg.shape.iter().product::<usize>();
    let m = cfg.class_count * cfg.per_class;
    let mut data = Vec::with_capacity(m * len);
    let mut labels = Vec::with_capacity(m);
    for (class, proto) in protos.iter().enumerate() {
        for _ in 0..cfg.per_class {
            if cfg.noise == 0.0 {
                data.extend_from_slice(proto);
            } else {
                data.extend(proto.iter().map(|&p| (p + noise.sample(&mut rng)).clamp(0.0, 1.0)));
            }
            labels.push(class);
        }
    }
    let [c, h, w] = cfg.shape;
    Dataset::new(Tensor::new(vec![m, c, h, w], data)?, labels, cfg.class_count)
}

/// Fixed, evenly stratified list of dataset indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeSet {
    indices: Vec<usize>,
}

impl ProbeSet {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draws `n_total / class_count` indices per class uniformly without
/// replacement. Indices are grouped by class.
pub fn sample_probe(ds: &Dataset, n_total: usize, seed: u64) -> Result<ProbeSet> {
    if n_total == 0 || n_total % ds.class_count != 0 {
        return Err(Error::InvalidArgument(format!(
            "probe size {n_total} is not a positive multiple of {} classes",
            ds.class_count
        )));
    }
    let per_class = n_total / ds.class_count;
    let mut rng = rng::stream(seed, rng::Purpose::Probe);
    let mut indices = Vec::with_capacity(n_total);
    for class in 0..ds.class_count {
        let mut pool: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if pool.len() < per_class {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} samples, probe needs {per_class}",
                pool.len()
            )));
        }
        let (chosen, _) = pool.partial_shuffle(&mut rng, per_class);
        indices.extend_from_slice(chosen);
    }
    Ok(ProbeSet { indices })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentMode {
    #[default]
    PerSample,
    /// One crop offset and one flip decision for the whole batch.
    BatchShared,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    #[serde(default = "default_crop_pad")]
    pub crop_pad: usize,
    #[serde(default = "default_flip_prob")]
    pub flip_prob: f64,
    #[serde(default)]
    pub mode: AugmentMode,
}

fn default_crop_pad() -> usize {
    4
}

fn default_flip_prob() -> f64 {
    0.5
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            crop_pad: default_crop_pad(),
            flip_prob: default_flip_prob(),
            mode: AugmentMode::PerSample,
        }
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        AugmentationConfig {
            crop_pad: 0,
            flip_prob: 0.0,
            mode: AugmentMode::PerSample,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::InvalidArgument(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        Ok(())
    }
}

/// The draw applied to one image: crop origin inside the zero-padded image
/// (`0..=2·pad` on each axis) and the horizontal-flip decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

fn draw_params<R: Rng + ?Sized>(cfg: &AugmentationConfig, rng: &mut R) -> AugmentParams {
    let span = 2 * cfg.crop_pad + 1;
    AugmentParams {
        dy: rng.random_range(0..span),
        dx: rng.random_range(0..span),
        flip: rng.random::<f64>() < cfg.flip_prob,
    }
}

fn apply(img: &[f64], out: &mut [f64], [c, h, w]: [usize; 3], pad: usize, p: AugmentParams) {
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + p.dy) as isize - pad as isize;
            for x in 0..w {
                let xs = if p.flip { w - 1 - x } else { x };
                let sx = (xs + p.dx) as isize - pad as isize;
                out[(ch * h + y) * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    img[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Pad-crop-flip augmentation. Returns the augmented batch and the draw
/// used for every image.
pub fn augment<R: Rng + ?Sized>(batch: &Tensor, cfg: &AugmentationConfig, rng: &mut R) -> (Tensor, Vec<AugmentParams>) {
    let n = batch.batch();
    let shape = [batch.shape()[1], batch.shape()[2], batch.shape()[3]];
    let params: Vec<AugmentParams> = match cfg.mode {
        AugmentMode::PerSample => (0..n).map(|_| draw_params(cfg, rng)).collect(),
        AugmentMode::BatchShared => vec![draw_params(cfg, rng); n],
    };
    let len = batch.sample_len();
    let mut out = vec![0.0; batch.numel()];
    for (i, p) in params.iter().enumerate() {
        apply(batch.sample(i), &mut out[i * len..(i + 1) * len], shape, cfg.crop_pad, *p);
    }
    (Tensor::new(batch.shape().to_vec(), out).expect("same shape"), params)
}

/// Independent uniform noise in `[−ε, ε]` per pixel, then clipped to `[0, 1]`.
pub fn add_anisotropic_noise<R: Rng + ?Sized>(batch: &Tensor, epsilon: f64, rng: &mut R) -> Result<Tensor> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise budget {epsilon} must be finite and non-negative")));
    }
    if epsilon == 0.0 {
        return Ok(batch.clone());
    }
    let data = batch
        .data()
        .iter()
        .map(|&v| (v + rng.random_range(-epsilon..=epsilon)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(batch.shape().to_vec(), data)
}

/// Deterministic per-epoch permutation of `0..m`.
pub fn shuffled_indices(m: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut rng::indexed(seed, rng::Purpose::Shuffle, epoch as u64));
    idx
}
