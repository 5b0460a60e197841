//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every primitive appends one node holding its output value. `backward`
//! walks the tape from a root towards the leaves and returns adjoints for
//! every node that was marked as needing a gradient. A tape can be replayed
//! backwards any number of times with different seeds, which is how
//! per-class Jacobian rows share a single forward pass.

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (oh, ow, k) = (self.out_height(), self.out_width(), self.kernel);
        let l = oh * ow;
        for c in 0..self.in_channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * ow + ox] = if iy >= 0
                                && (iy as usize) < self.height
                                && ix >= 0
                                && (ix as usize) < self.width
                            {
                                plane[iy as usize * self.width + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let (oh, ow, k) = (self.out_height(), self.out_width(), self.kernel);
        let l = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.height {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.width {
                                plane[iy as usize * self.width + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Where a batch-norm node takes its normalization statistics from.
#[derive(Clone, Debug)]
pub enum NormStats<'a> {
    /// Mean and biased variance of the incoming batch; gradients flow
    /// through the statistics.
    Batch,
    /// Caller-supplied per-channel mean and variance, treated as constants.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
        inv_std: Vec<f64>,
        xhat: Vec<f64>,
        through_stats: bool,
    },
    Relu {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        x: NodeId,
        target: Vec<f64>,
    },
    SoftmaxMse {
        logits: NodeId,
        target: Vec<f64>,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu { .. } => "relu",
            Op::Tanh { .. } => "tanh",
            Op::Reshape { .. } => "reshape",
            Op::GlobalAvgPool { .. } => "global-avg-pool",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::SoftmaxCrossEntropy { .. } => "softmax-cross-entropy",
            Op::Mse { .. } => "mse",
            Op::SoftmaxMse { .. } => "softmax-mse",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu { x }
            | Op::Tanh { x }
            | Op::Reshape { x }
            | Op::GlobalAvgPool { x }
            | Op::Scale { x, .. }
            | Op::Mse { x, .. } => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. } | Op::SoftmaxMse { logits, .. } => vec![*logits],
            Op::Add { a, b } => vec![*a, *b],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One entry of the computation record: a primitive with its node ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordEntry {
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, node: NodeId) -> Option<&[f64]> {
        self.grads[node.0].as_deref()
    }

    pub fn take(&mut self, node: NodeId) -> Option<Vec<f64>> {
        self.grads[node.0].take()
    }
}

/// Row-wise softmax of a `[n, k]` buffer.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut probs = vec![0.0; logits.len()];
    for (row, out) in logits.chunks(k).zip(probs.chunks_mut(k)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &z) in out.iter_mut().zip(row) {
            *o = (z - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    probs
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    pub fn needs_grad(&self, node: NodeId) -> bool {
        self.nodes[node.0].needs_grad
    }

    /// Batch statistics (mean, biased variance) seen by a batch-norm node.
    pub fn norm_stats(&self, node: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[node.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// The ordered list of recorded primitives.
    pub fn record(&self) -> Vec<RecordEntry> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| RecordEntry {
                op: n.op.name(),
                inputs: n.op.inputs().iter().map(|id| id.0).collect(),
                output: i,
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NumericFault { op: op.name() });
        }
        let needs_grad = op.inputs().iter().any(|id| self.nodes[id.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// `x[N, in] · wᵀ + b` with `w[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ndim() != 2 || wv.ndim() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::shape(
                "linear",
                format!("input {:?}, weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (n, fan_in, out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let mut y = vec![0.0; n * out];
        gemm(n, fan_in, out, xv.data(), false, wv.data(), true, 0.0, &mut y);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != out {
                return Err(Error::shape("linear", format!("bias {:?}", bv.shape())));
            }
            for row in y.chunks_mut(out) {
                for (v, bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
        }
        self.push(Tensor::new(vec![n, out], y)?, Op::Linear { x, w, b })
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ndim() != 4 || wv.ndim() != 4 || xv.shape()[1] != wv.shape()[1] || wv.shape()[2] != wv.shape()[3] {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let geom = ConvGeometry {
            in_channels: xv.shape()[1],
            height: xv.shape()[2],
            width: xv.shape()[3],
            out_channels: wv.shape()[0],
            kernel: wv.shape()[2],
            stride,
            pad,
        };
        if geom.height + 2 * pad < geom.kernel || geom.width + 2 * pad < geom.kernel || stride == 0 {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let n = xv.shape()[0];
        let (pl, l, o) = (geom.patch_len(), geom.out_len(), geom.out_channels);
        let in_len = xv.sample_len();
        let mut cols = vec![0.0; n * pl * l];
        let mut y = vec![0.0; n * o * l];
        for s in 0..n {
            let c = &mut cols[s * pl * l..(s + 1) * pl * l];
            geom.im2col(&xv.data()[s * in_len..(s + 1) * in_len], c);
            gemm(o, pl, l, wv.data(), false, c, false, 0.0, &mut y[s * o * l..(s + 1) * o * l]);
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != o {
                return Err(Error::shape("conv2d", format!("bias {:?}", bv.shape())));
            }
            for s in 0..n {
                for (ch, plane) in y[s * o * l..(s + 1) * o * l].chunks_mut(l).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bv.data()[ch]);
                }
            }
        }
        let shape = vec![n, o, geom.out_height(), geom.out_width()];
        self.push(Tensor::new(shape, y)?, Op::Conv2d { x, w, b, geom, cols })
    }

    /// Per-channel normalization of `[N, C]` or `[N, C, H, W]` input.
    ///
    /// With [`NormStats::Batch`] the channel must see at least two values.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.ndim() != 2 && xv.ndim() != 4 {
            return Err(Error::shape("batchnorm", format!("input {:?}", xv.shape())));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let spatial: usize = xv.shape()[2..].iter().product();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.numel() != c || bv.numel() != c {
            return Err(Error::shape("batchnorm", format!("{c} channels, affine {:?}", gv.shape())));
        }
        let m = n * spatial;
        let through_stats = matches!(stats, NormStats::Batch);
        let (mean, var) = match stats {
            NormStats::Batch => {
                if m < 2 {
                    return Err(Error::DegenerateVariance {
                        layer: 0,
                        detail: format!("{m} value(s) per channel"),
                    });
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        s += xv.data()[base..base + spatial].iter().sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut ss = 0.0;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        ss += xv.data()[base..base + spatial]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / m as f64;
                }
                (mean, var)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm", "fixed statistics length"));
                }
                (mean.to_vec(), var.to_vec())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.numel()];
        let mut y = vec![0.0; xv.numel()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for j in base..base + spatial {
                    let h = (xv.data()[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    y[j] = gv.data()[ch] * h + bv.data()[ch];
                }
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::new(shape, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                inv_std,
                xhat,
                through_stats,
            },
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let y: Vec<f64> = xv.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, y)?, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let y: Vec<f64> = xv.data().iter().map(|v| v.tanh()).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, y)?, Op::Tanh { x })
    }

    /// Flattens everything after the batch dimension.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let shape = vec![xv.batch(), xv.sample_len()];
        let y = xv.clone().reshape(shape)?;
        self.push(y, Op::Reshape { x })
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.ndim() != 4 {
            return Err(Error::shape("global-avg-pool", format!("input {:?}", xv.shape())));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let spatial = xv.shape()[2] * xv.shape()[3];
        let y: Vec<f64> = xv
            .data()
            .chunks(spatial)
            .map(|p| p.iter().sum::<f64>() / spatial as f64)
            .collect();
        self.push(Tensor::new(vec![n, c], y)?, Op::GlobalAvgPool { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let y: Vec<f64> = av.data().iter().zip(bv.data()).map(|(p, q)| p + q).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, y)?, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let y: Vec<f64> = xv.data().iter().map(|v| v * factor).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, y)?, Op::Scale { x, factor })
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::shape(
                "softmax-cross-entropy",
                format!("logits {:?}, {} labels", lv.shape(), labels.len()),
            ));
        }
        let k = lv.shape()[1];
        if labels.iter().any(|&y| y >= k) {
            return Err(Error::shape("softmax-cross-entropy", "label out of range"));
        }
        let probs = softmax_rows(lv.data(), k);
        let n = labels.len();
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean over the batch of `Σ_k (x_k − target_k)²`.
    pub fn mse(&mut self, x: NodeId, target: &[f64]) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.numel() != target.len() {
            return Err(Error::shape("mse", format!("{:?} vs {} targets", xv.shape(), target.len())));
        }
        let n = xv.batch().max(1);
        let loss: f64 = xv.data().iter().zip(target).map(|(a, t)| (a - t) * (a - t)).sum();
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::Mse {
                x,
                target: target.to_vec(),
            },
        )
    }

    /// Mean over the batch of `Σ_k (softmax(logits)_k − target_k)²`; rows
    /// with `mask[i] == false` contribute nothing.
    pub fn softmax_mse(&mut self, logits: NodeId, target: &[f64], mask: &[bool]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.numel() != target.len() || lv.shape()[0] != mask.len() {
            return Err(Error::shape("softmax-mse", format!("logits {:?}", lv.shape())));
        }
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        let probs = softmax_rows(lv.data(), k);
        let mut loss = 0.0;
        for i in 0..n {
            if mask[i] {
                for j in i * k..(i + 1) * k {
                    loss += (probs[j] - target[j]).powi(2);
                }
            }
        }
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxMse {
                logits,
                target: target.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
        )
    }

    /// Propagates `seed` (shaped like the root's value) back to every node
    /// that needs a gradient.
    pub fn backward(&self, root: NodeId, seed: &[f64]) -> Result<Grads> {
        let root_len = self.value(root).numel();
        if seed.len() != root_len {
            return Err(Error::shape("backward", format!("seed {} vs root {}", seed.len(), root_len)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(seed.to_vec());
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericFault { op: "backward" });
            }
        }
        Ok(Grads { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let wants = |id: &NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, fan_in, out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if wants(x) {
                    let dx = accumulate(&mut grads[x.0], n * fan_in);
                    gemm(n, out, fan_in, g, false, wv.data(), false, 1.0, dx);
                }
                if wants(w) {
                    let dw = accumulate(&mut grads[w.0], out * fan_in);
                    gemm(out, n, fan_in, g, true, xv.data(), false, 1.0, dw);
                }
                if let Some(b) = b.filter(wants) {
                    let db = accumulate(&mut grads[b.0], out);
                    for row in g.chunks(out) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let wv = self.value(*w);
                let n = self.value(*x).shape()[0];
                let (pl, l, o) = (geom.patch_len(), geom.out_len(), geom.out_channels);
                let in_len = geom.in_channels * geom.height * geom.width;
                if wants(w) {
                    let dw = accumulate(&mut grads[w.0], o * pl);
                    for s in 0..n {
                        gemm(o, l, pl, &g[s * o * l..(s + 1) * o * l], false, &cols[s * pl * l..(s + 1) * pl * l], true, 1.0, dw);
                    }
                }
                if let Some(b) = b.filter(wants) {
                    let db = accumulate(&mut grads[b.0], o);
                    for s in 0..n {
                        for (ch, plane) in g[s * o * l..(s + 1) * o * l].chunks(l).enumerate() {
                            db[ch] += plane.iter().sum::<f64>();
                        }
                    }
                }
                if wants(x) {
                    let mut dcols = vec![0.0; pl * l];
                    let dx = accumulate(&mut grads[x.0], n * in_len);
                    for s in 0..n {
                        gemm(pl, o, l, wv.data(), true, &g[s * o * l..(s + 1) * o * l], false, 0.0, &mut dcols);
                        geom.col2im_add(&dcols, &mut dx[s * in_len..(s + 1) * in_len]);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
                through_stats,
                ..
            } => {
                let xv = self.value(*x);
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let spatial: usize = xv.shape()[2..].iter().product();
                let m = (n * spatial) as f64;
                let gv = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        for j in base..base + spatial {
                            sum_dy[ch] += g[j];
                            sum_dy_xhat[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if wants(gamma) {
                    let d = accumulate(&mut grads[gamma.0], c);
                    d.iter_mut().zip(&sum_dy_xhat).for_each(|(a, v)| *a += v);
                }
                if wants(beta) {
                    let d = accumulate(&mut grads[beta.0], c);
                    d.iter_mut().zip(&sum_dy).for_each(|(a, v)| *a += v);
                }
                if wants(x) {
                    let dx = accumulate(&mut grads[x.0], xv.numel());
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * spatial;
                            let scale = gv[ch] * inv_std[ch];
                            for j in base..base + spatial {
                                dx[j] += if *through_stats {
                                    scale / m * (m * g[j] - sum_dy[ch] - xhat[j] * sum_dy_xhat[ch])
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if wants(x) {
                    let xv = self.value(*x);
                    let dx = accumulate(&mut grads[x.0], xv.numel());
                    for ((d, &v), gi) in dx.iter_mut().zip(xv.data()).zip(g) {
                        if v > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Tanh { x } => {
                if wants(x) {
                    let y = node.value.data();
                    let dx = accumulate(&mut grads[x.0], y.len());
                    for ((d, yi), gi) in dx.iter_mut().zip(y).zip(g) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Reshape { x } => {
                if wants(x) {
                    let dx = accumulate(&mut grads[x.0], g.len());
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::GlobalAvgPool { x } => {
                if wants(x) {
                    let xv = self.value(*x);
                    let spatial = xv.shape()[2] * xv.shape()[3];
                    let dx = accumulate(&mut grads[x.0], xv.numel());
                    for (plane, gi) in dx.chunks_mut(spatial).zip(g) {
                        let share = gi / spatial as f64;
                        plane.iter_mut().for_each(|d| *d += share);
                    }
                }
            }
            Op::Add { a, b } => {
                for t in [a, b] {
                    if wants(t) {
                        let d = accumulate(&mut grads[t.0], g.len());
                        d.iter_mut().zip(g).for_each(|(p, v)| *p += v);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if wants(x) {
                    let d = accumulate(&mut grads[x.0], g.len());
                    d.iter_mut().zip(g).for_each(|(p, v)| *p += v * factor);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if wants(logits) {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let d = accumulate(&mut grads[logits.0], probs.len());
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            d[i * k + j] += scale * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse { x, target } => {
                if wants(x) {
                    let xv = self.value(*x);
                    let scale = 2.0 * g[0] / xv.batch().max(1) as f64;
                    let d = accumulate(&mut grads[x.0], target.len());
                    for ((p, a), t) in d.iter_mut().zip(xv.data()).zip(target) {
                        *p += scale * (a - t);
                    }
                }
            }
            Op::SoftmaxMse {
                logits,
                target,
                mask,
                probs,
            } => {
                if wants(logits) {
                    let n = mask.len();
                    let k = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let d = accumulate(&mut grads[logits.0], probs.len());
                    for i in (0..n).filter(|&i| mask[i]) {
                        let p = &probs[i * k..(i + 1) * k];
                        let t = &target[i * k..(i + 1) * k];
                        let u: Vec<f64> = p.iter().zip(t).map(|(a, b)| 2.0 * (a - b)).collect();
                        let pu: f64 = p.iter().zip(&u).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            d[i * k + j] += scale * p[j] * (u[j] - pu);
                        }
                    }
                }
            }
        }
    }
}
