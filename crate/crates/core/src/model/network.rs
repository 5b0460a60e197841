use crate::autodiff::{NodeId, NormStats, Tape};
use crate::error::{Error, Result};
use crate::model::batchnorm::{BatchNormState, BufferMode, FrozenStats, Phase};
use crate::model::spec::{ActShape, LayerSpec, ModelSpec};
use crate::params::{ParamLayout, ParamVector};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Step {
    Conv {
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Linear {
        w: usize,
        b: Option<usize>,
    },
    Norm {
        gamma: usize,
        beta: usize,
        bn: usize,
    },
    Relu,
    Tanh,
    Flatten,
    Pool,
}

/// A validated model specification with its parameter layout.
#[derive(Clone, Debug)]
pub struct Network {
    spec: ModelSpec,
    layout: ParamLayout,
    steps: Vec<Step>,
    norm_channels: Vec<usize>,
    /// Fan-in of every weight slot, used by initialization.
    fan_in: Vec<(usize, usize)>,
    bias_slots: Vec<usize>,
    gamma_slots: Vec<usize>,
}

/// Mutable model state: parameters plus batch-norm buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub params: ParamVector,
    pub norms: Vec<BatchNormState>,
    pub mode: BufferMode,
}

impl ModelState {
    /// Switches every batch-norm layer at once; buffer contents are kept.
    pub fn set_buffer_mode(&mut self, mode: BufferMode) {
        self.mode = mode;
    }
}

/// Which leaves of a recorded forward pass need gradients.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradTargets {
    pub params: bool,
    pub input: bool,
}

/// Normalization statistics to use for a recorded pass.
#[derive(Clone, Copy, Debug)]
pub enum StatsSource<'a> {
    Phase(Phase),
    Frozen(&'a FrozenStats),
}

pub struct Recorded {
    pub tape: Tape,
    pub input: NodeId,
    pub logits: NodeId,
    pub params: Vec<NodeId>,
    pub norms: Vec<NodeId>,
}

impl Recorded {
    /// Flattens the parameter-leaf adjoints of `grads` into layout order.
    pub fn gather_param_grads(&self, grads: &crate::autodiff::Grads, layout: &ParamLayout, out: &mut [f64]) {
        for (slot, node) in layout.slots().iter().zip(&self.params) {
            match grads.get(*node) {
                Some(g) => out[slot.range()].copy_from_slice(g),
                None => out[slot.range()].iter_mut().for_each(|v| *v = 0.0),
            }
        }
    }

    /// (mean, biased variance) seen by each batch-norm layer.
    pub fn norm_stats(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.norms
            .iter()
            .map(|n| {
                let (m, v) = self.tape.norm_stats(*n).expect("batch-norm node");
                (m.to_vec(), v.to_vec())
            })
            .collect()
    }
}

impl Network {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let shapes = spec.trace_shapes()?;
        let mut layout = ParamLayout::new();
        let mut steps = Vec::new();
        let mut norm_channels = Vec::new();
        let mut fan_in = Vec::new();
        let mut bias_slots = Vec::new();
        let mut gamma_slots = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            let input = shapes[i];
            let step = match (*layer, input) {
                (
                    LayerSpec::Conv2d {
                        out_channels,
                        kernel,
                        stride,
                        pad,
                        bias,
                    },
                    ActShape::Image { c, .. },
                ) => {
                    let w = layout.push(format!("layer{i}.conv.weight"), vec![out_channels, c, kernel, kernel]);
                    fan_in.push((w, c * kernel * kernel));
                    let b = bias.then(|| layout.push(format!("layer{i}.conv.bias"), vec![out_channels]));
                    bias_slots.extend(b);
                    Step::Conv { w, b, stride, pad }
                }
                (LayerSpec::Linear { out, bias }, ActShape::Flat(n)) => {
                    let w = layout.push(format!("layer{i}.linear.weight"), vec![out, n]);
                    fan_in.push((w, n));
                    let b = bias.then(|| layout.push(format!("layer{i}.linear.bias"), vec![out]));
                    bias_slots.extend(b);
                    Step::Linear { w, b }
                }
                (LayerSpec::BatchNorm, s) => {
                    let c = match s {
                        ActShape::Image { c, .. } => c,
                        ActShape::Flat(n) => n,
                    };
                    let gamma = layout.push(format!("layer{i}.bn.gamma"), vec![c]);
                    let beta = layout.push(format!("layer{i}.bn.beta"), vec![c]);
                    gamma_slots.push(gamma);
                    bias_slots.push(beta);
                    norm_channels.push(c);
                    Step::Norm {
                        gamma,
                        beta,
                        bn: norm_channels.len() - 1,
                    }
                }
                (LayerSpec::Relu, _) => Step::Relu,
                (LayerSpec::Tanh, _) => Step::Tanh,
                (LayerSpec::Flatten, _) => Step::Flatten,
                (LayerSpec::GlobalAvgPool, _) => Step::Pool,
                _ => unreachable!("shapes validated by trace_shapes"),
            };
            steps.push(step);
        }
        Ok(Network {
            spec,
            layout,
            steps,
            norm_channels,
            fan_in,
            bias_slots,
            gamma_slots,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn n_out(&self) -> usize {
        self.spec.n_out
    }

    pub fn param_count(&self) -> usize {
        self.layout.total()
    }

    pub fn norm_channels(&self) -> &[usize] {
        &self.norm_channels
    }

    pub(crate) fn weight_fan_in(&self) -> &[(usize, usize)] {
        &self.fan_in
    }

    pub(crate) fn bias_slots(&self) -> &[usize] {
        &self.bias_slots
    }

    pub(crate) fn gamma_slots(&self) -> &[usize] {
        &self.gamma_slots
    }

    pub fn fresh_norms(&self) -> Vec<BatchNormState> {
        self.norm_channels.iter().map(|&c| BatchNormState::new(c)).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [c, h, w] = self.spec.input;
        if x.ndim() != 4 || x.shape()[1..] != [c, h, w] || x.batch() == 0 {
            return Err(Error::shape(
                "forward",
                format!("expected [N, {c}, {h}, {w}], got {:?}", x.shape()),
            ));
        }
        Ok(())
    }

    fn check_state(&self, state: &ModelState) -> Result<()> {
        if state.params.layout() != &self.layout {
            return Err(Error::shape("forward", "parameter layout does not match the model"));
        }
        if state.norms.len() != self.norm_channels.len()
            || state.norms.iter().zip(&self.norm_channels).any(|(s, &c)| s.channels() != c)
        {
            return Err(Error::shape("forward", "batch-norm buffers do not match the model"));
        }
        Ok(())
    }

    /// Runs the model on `x`, recording every primitive on a fresh tape.
    pub fn record(&self, state: &ModelState, x: Tensor, stats: StatsSource<'_>, targets: GradTargets) -> Result<Recorded> {
        self.check_input(&x)?;
        self.check_state(state)?;
        let batch = x.batch();
        let mut tape = Tape::new();
        let input = tape.leaf(x, targets.input);
        let params: Vec<NodeId> = state
            .params
            .unflatten()
            .into_iter()
            .map(|t| tape.leaf(t, targets.params))
            .collect();
        let mut norms = Vec::new();
        let mut h = input;
        for step in &self.steps {
            h = match *step {
                Step::Conv { w, b, stride, pad } => tape.conv2d(h, params[w], b.map(|b| params[b]), stride, pad)?,
                Step::Linear { w, b } => tape.linear(h, params[w], b.map(|b| params[b]))?,
                Step::Norm { gamma, beta, bn } => {
                    let layer = &state.norms[bn];
                    let norm_stats = match stats {
                        StatsSource::Phase(Phase::Train) => NormStats::Batch,
                        StatsSource::Phase(Phase::Eval) => match state.mode {
                            BufferMode::WithBuffer => NormStats::Fixed {
                                mean: &layer.running_mean,
                                var: &layer.running_var,
                            },
                            BufferMode::WithoutBuffer => {
                                if batch < 2 {
                                    return Err(Error::DegenerateVariance {
                                        layer: bn,
                                        detail: "evaluation without buffers needs a batch of at least two".into(),
                                    });
                                }
                                NormStats::Batch
                            }
                        },
                        StatsSource::Frozen(f) => {
                            let (mean, var) = f.layers.get(bn).ok_or_else(|| {
                                Error::shape("forward", "frozen statistics missing a layer")
                            })?;
                            NormStats::Fixed { mean, var }
                        }
                    };
                    let node = tape
                        .batch_norm(h, params[gamma], params[beta], norm_stats, layer.eps)
                        .map_err(|e| match e {
                            Error::DegenerateVariance { detail, .. } => Error::DegenerateVariance { layer: bn, detail },
                            other => other,
                        })?;
                    norms.push(node);
                    node
                }
                Step::Relu => tape.relu(h)?,
                Step::Tanh => tape.tanh(h)?,
                Step::Flatten => tape.flatten(h)?,
                Step::Pool => tape.global_avg_pool(h)?,
            };
        }
        Ok(Recorded {
            tape,
            input,
            logits: h,
            params,
            norms,
        })
    }

    /// Logits `[N, n_out]`.
    pub fn forward(&self, state: &ModelState, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let rec = self.record(state, x.clone(), StatsSource::Phase(phase), GradTargets::default())?;
        Ok(rec.tape.value(rec.logits).clone())
    }

    /// Statistics the kernel computation normalizes with: the running
    /// buffers in `WithBuffer` mode, otherwise the statistics of `x` itself.
    pub fn eval_stats(&self, state: &ModelState, x: &Tensor) -> Result<FrozenStats> {
        match state.mode {
            BufferMode::WithBuffer => Ok(FrozenStats {
                layers: state
                    .norms
                    .iter()
                    .map(|n| (n.running_mean.clone(), n.running_var.clone()))
                    .collect(),
            }),
            BufferMode::WithoutBuffer => {
                if self.norm_channels.is_empty() {
                    return Ok(FrozenStats { layers: vec![] });
                }
                let rec = self.record(state, x.clone(), StatsSource::Phase(Phase::Eval), GradTargets::default())?;
                Ok(FrozenStats {
                    layers: rec.norm_stats(),
                })
            }
        }
    }

    /// Folds the batch statistics of a training pass into the buffers.
    /// Does nothing in `WithoutBuffer` mode.
    pub fn update_buffers(&self, state: &mut ModelState, rec: &Recorded) -> Result<()> {
        if state.mode == BufferMode::WithoutBuffer {
            return Ok(());
        }
        let batch = rec.tape.value(rec.input).batch();
        for (i, node) in rec.norms.iter().enumerate() {
            let value = rec.tape.value(*node);
            let count = batch * value.shape()[2..].iter().product::<usize>();
            let (mean, var) = rec.tape.norm_stats(*node).expect("batch-norm node");
            state.norms[i].update(mean, var, count).map_err(|e| match e {
                Error::DegenerateVariance { detail, .. } => Error::DegenerateVariance { layer: i, detail },
                other => other,
            })?;
        }
        Ok(())
    }
}
