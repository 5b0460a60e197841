//! Layer descriptors and the architecture registry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        #[serde(default)]
        bias: bool,
    },
    Linear {
        out: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    BatchNorm,
    Relu,
    Tanh,
    Flatten,
    GlobalAvgPool,
}

fn default_true() -> bool {
    true
}

/// A sequential classifier: input image shape, layers, class count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub n_out: usize,
}

/// Activation shape flowing between layers (batch dimension omitted).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ActShape {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ModelSpec {
    /// Checks that consecutive layers compose and the network ends in a
    /// single `n_out`-wide linear head.
    pub(crate) fn trace_shapes(&self) -> Result<Vec<ActShape>> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 || self.n_out == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        let mut shape = ActShape::Image { c, h, w };
        let mut shapes = vec![shape];
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: &str| Error::InvalidArgument(format!("layer {i} ({layer:?}): {msg}"));
            shape = match (*layer, shape) {
                (
                    LayerSpec::Conv2d {
                        out_channels,
                        kernel,
                        stride,
                        pad,
                        ..
                    },
                    ActShape::Image { h, w, .. },
                ) => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(bad("zero-sized convolution"));
                    }
                    if h + 2 * pad < kernel || w + 2 * pad < kernel {
                        return Err(bad("kernel larger than padded input"));
                    }
                    ActShape::Image {
                        c: out_channels,
                        h: (h + 2 * pad - kernel) / stride + 1,
                        w: (w + 2 * pad - kernel) / stride + 1,
                    }
                }
                (LayerSpec::Conv2d { .. }, ActShape::Flat(_)) => return Err(bad("convolution needs image input")),
                (LayerSpec::Linear { out, .. }, ActShape::Flat(_)) => {
                    if out == 0 {
                        return Err(bad("zero-width linear layer"));
                    }
                    ActShape::Flat(out)
                }
                (LayerSpec::Linear { .. }, ActShape::Image { .. }) => {
                    return Err(bad("linear layer needs flat input (add flatten or global-avg-pool)"))
                }
                (LayerSpec::Flatten, ActShape::Image { c, h, w }) => ActShape::Flat(c * h * w),
                (LayerSpec::Flatten, s @ ActShape::Flat(_)) => s,
                (LayerSpec::GlobalAvgPool, ActShape::Image { c, .. }) => ActShape::Flat(c),
                (LayerSpec::GlobalAvgPool, ActShape::Flat(_)) => return Err(bad("pooling needs image input")),
                (LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::Tanh, s) => s,
            };
            shapes.push(shape);
        }
        match self.layers.last() {
            Some(LayerSpec::Linear { out, .. }) if *out == self.n_out => Ok(shapes),
            _ => Err(Error::InvalidArgument(format!(
                "model must end in a linear layer of width n_out = {}",
                self.n_out
            ))),
        }
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::BatchNorm))
    }
}

/// Architectures available by name.
pub const ARCHITECTURES: &[&str] = &["linear", "mlp", "mlp-tanh", "mlp-bn", "tiny-cnn", "desk-cnn"];

/// Builds a registry architecture for the given input and class count.
///
/// `width` is the hidden width of the MLPs and the first-stage channel
/// count of the CNNs.
pub fn architecture(name: &str, input: [usize; 3], n_out: usize, width: usize) -> Result<ModelSpec> {
    use LayerSpec::*;
    let lin = |out| Linear { out, bias: true };
    let conv = |out_channels, stride| Conv2d {
        out_channels,
        kernel: 3,
        stride,
        pad: 1,
        bias: false,
    };
    let layers = match name {
        "linear" => vec![Flatten, lin(n_out)],
        "mlp" => vec![Flatten, lin(width), Relu, lin(width), Relu, lin(n_out)],
        "mlp-tanh" => vec![Flatten, lin(width), Tanh, lin(width), Tanh, lin(n_out)],
        "mlp-bn" => vec![
            Flatten,
            lin(width),
            BatchNorm,
            Relu,
            lin(width),
            BatchNorm,
            Relu,
            lin(n_out),
        ],
        "tiny-cnn" => vec![
            conv(width, 2),
            BatchNorm,
            Relu,
            conv(2 * width, 2),
            BatchNorm,
            Relu,
            GlobalAvgPool,
            lin(n_out),
        ],
        // conv-BN-relu x4, stride-2 at the second and third block.
        "desk-cnn" => vec![
            conv(width, 1),
            BatchNorm,
            Relu,
            conv(2 * width, 2),
            BatchNorm,
            Relu,
            conv(4 * width, 2),
            BatchNorm,
            Relu,
            conv(8 * width, 1),
            BatchNorm,
            Relu,
            GlobalAvgPool,
            lin(n_out),
        ],
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown architecture {other:?}; expected one of {ARCHITECTURES:?}"
            )))
        }
    };
    let spec = ModelSpec { input, layers, n_out };
    spec.trace_shapes()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_architectures_validate() {
        for name in ARCHITECTURES {
            architecture(name, [3, 32, 32], 10, 8).unwrap();
        }
        assert!(architecture("resnet", [3, 32, 32], 10, 8).is_err());
    }

    #[test]
    fn missing_head_is_rejected() {
        let spec = ModelSpec {
            input: [1, 2, 2],
            layers: vec![LayerSpec::Flatten, LayerSpec::Linear { out: 3, bias: true }, LayerSpec::Relu],
            n_out: 3,
        };
        assert!(spec.trace_shapes().is_err());
    }

    #[test]
    fn linear_on_image_needs_flatten() {
        let spec = ModelSpec {
            input: [1, 2, 2],
            layers: vec![LayerSpec::Linear { out: 3, bias: true }],
            n_out: 3,
        };
        assert!(spec.trace_shapes().is_err());
    }
}
