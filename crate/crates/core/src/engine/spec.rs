//! Network descriptions and their compiled layer plan.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::prelayer::Linear;
use crate::tensor::{ConvGeometry, Shape};

/// Largest architecture width the engine's buffer scheme supports.
pub const MAX_WIDTH: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputSpec {
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
    Features {
        features: usize,
    },
}

impl InputSpec {
    /// The input taking samples of the given (batch-agnostic) shape.
    pub fn for_samples(shape: Shape) -> Self {
        match shape {
            Shape::Image { c, h, w, .. } => InputSpec::Image {
                channels: c,
                height: h,
                width: w,
            },
            Shape::Matrix { cols, .. } => InputSpec::Features { features: cols },
        }
    }

    pub fn shape(&self, batch: usize) -> Shape {
        match *self {
            InputSpec::Image {
                channels,
                height,
                width,
            } => Shape::image(batch, channels, height, width),
            InputSpec::Features { features } => Shape::matrix(batch, features),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Dense,
}

fn default_kernel() -> usize {
    3
}
fn default_stride() -> usize {
    1
}
fn default_pad() -> usize {
    1
}

/// One pre-activation layer: batch norm, scale/bias and ReLU on its input,
/// then a convolution or dense map with `out` output channels/features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub out: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_pad")]
    pub pad: usize,
}

impl LayerSpec {
    pub fn conv(out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            out,
            kernel,
            stride,
            pad,
        }
    }

    pub fn dense(out: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            out,
            kernel: 1,
            stride: 1,
            pad: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Unit {
    Layer(LayerSpec),
    /// Residual block: the layers' output plus a parameter-free shortcut of
    /// the block input (stride subsampling, zero-padded channels).
    Block {
        layers: Vec<LayerSpec>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub classes: usize,
}

/// Ordered layers with residual grouping and a classifier head.
///
/// The head is one more pre-activation layer whose linear map is global
/// average pooling (for image activations) followed by a dense classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputSpec,
    pub body: Vec<Unit>,
    pub head: HeadSpec,
}

impl NetworkSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid network spec: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network spec serializes")
    }

    /// Pre-activation residual network for images: a stem convolution,
    /// `stages.len()` stages of `blocks_per_stage` two-layer blocks, and the
    /// head. Every stage after the first halves the resolution with a
    /// stride-2 4×4 convolution and doubles the channels.
    pub fn preact_resnet(
        input: InputSpec,
        base_channels: usize,
        stages: usize,
        blocks_per_stage: usize,
        classes: usize,
    ) -> Self {
        let mut body = vec![Unit::Layer(LayerSpec::conv(base_channels, 3, 1, 1))];
        let mut channels = base_channels;
        for stage in 0..stages {
            for block in 0..blocks_per_stage {
                let first = if stage > 0 && block == 0 {
                    channels *= 2;
                    LayerSpec::conv(channels, 4, 2, 1)
                } else {
                    LayerSpec::conv(channels, 3, 1, 1)
                };
                body.push(Unit::Block {
                    layers: vec![first, LayerSpec::conv(channels, 3, 1, 1)],
                });
            }
        }
        NetworkSpec {
            input,
            body,
            head: HeadSpec { classes },
        }
    }

    /// Residual network of uniform width and resolution: a stem layer, then
    /// `blocks` blocks of `layers_per_block` layers each.
    pub fn uniform_resnet(
        input: InputSpec,
        channels: usize,
        blocks: usize,
        layers_per_block: usize,
        classes: usize,
    ) -> Self {
        let mut body = vec![Unit::Layer(LayerSpec::conv(channels, 3, 1, 1))];
        for _ in 0..blocks {
            body.push(Unit::Block {
                layers: vec![LayerSpec::conv(channels, 3, 1, 1); layers_per_block],
            });
        }
        NetworkSpec {
            input,
            body,
            head: HeadSpec { classes },
        }
    }

    /// `depth` layers of constant width followed by the head: a stem layer
    /// and two-layer residual blocks (a single trailing layer when
    /// `depth - 1` is odd). Convolutions for images, dense layers otherwise.
    pub fn residual_chain(input: InputSpec, channels: usize, depth: usize, classes: usize) -> Self {
        let layer = match input {
            InputSpec::Image { .. } => LayerSpec::conv(channels, 3, 1, 1),
            InputSpec::Features { .. } => LayerSpec::dense(channels),
        };
        let mut body = vec![Unit::Layer(layer)];
        let rest = depth.saturating_sub(1);
        for _ in 0..rest / 2 {
            body.push(Unit::Block {
                layers: vec![layer, layer],
            });
        }
        if rest % 2 == 1 {
            body.push(Unit::Layer(layer));
        }
        NetworkSpec {
            input,
            body,
            head: HeadSpec { classes },
        }
    }

    /// Plain stack of dense layers for feature vectors.
    pub fn mlp(features: usize, hidden: &[usize], classes: usize) -> Self {
        NetworkSpec {
            input: InputSpec::Features { features },
            body: hidden.iter().map(|&h| Unit::Layer(LayerSpec::dense(h))).collect(),
            head: HeadSpec { classes },
        }
    }

    pub fn compile(&self) -> Result<Network> {
        Network::compile(self)
    }
}

/// Parameter-free shortcut from a block input to its output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shortcut {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
}

impl Shortcut {
    fn new(from: Shape, to: Shape) -> Result<Self> {
        let (ci, co) = (from.channels(), to.channels());
        let (hi, wi, ho, wo) = match (from, to) {
            (Shape::Image { h, w, .. }, Shape::Image { h: ho, w: wo, .. }) => (h, w, ho, wo),
            (Shape::Matrix { .. }, Shape::Matrix { .. }) => (1, 1, 1, 1),
            _ => return Err(dim_err!("shortcut cannot join {from} and {to}")),
        };
        if co < ci {
            return Err(dim_err!("shortcut cannot drop channels ({ci} -> {co})"));
        }
        if hi % ho != 0 || wi % wo != 0 || hi / ho != wi / wo {
            return Err(dim_err!(
                "shortcut needs an integral common stride from {hi}x{wi} to {ho}x{wo}"
            ));
        }
        Ok(Shortcut {
            in_channels: ci,
            out_channels: co,
            in_h: hi,
            in_w: wi,
            out_h: ho,
            out_w: wo,
            stride: hi / ho,
        })
    }

    /// `out += S(input)` for one batch.
    pub(crate) fn add_forward<T: crate::Real>(&self, batch: usize, input: &[T], out: &mut [T]) {
        let (in_plane, out_plane) = (self.in_h * self.in_w, self.out_h * self.out_w);
        for n in 0..batch {
            for c in 0..self.in_channels {
                let src = &input[(n * self.in_channels + c) * in_plane..][..in_plane];
                let dst = &mut out[(n * self.out_channels + c) * out_plane..][..out_plane];
                for y in 0..self.out_h {
                    for x in 0..self.out_w {
                        let v = &mut dst[y * self.out_w + x];
                        *v = *v + src[y * self.stride * self.in_w + x * self.stride];
                    }
                }
            }
        }
    }

    /// `grad_in = Sᵀ(grad_out)`, overwriting `grad_in`.
    pub(crate) fn backward<T: crate::Real>(&self, batch: usize, grad_out: &[T], grad_in: &mut [T]) {
        grad_in.iter_mut().for_each(|v| *v = T::zero());
        let (in_plane, out_plane) = (self.in_h * self.in_w, self.out_h * self.out_w);
        for n in 0..batch {
            for c in 0..self.in_channels {
                let dst = &mut grad_in[(n * self.in_channels + c) * in_plane..][..in_plane];
                let src = &grad_out[(n * self.out_channels + c) * out_plane..][..out_plane];
                for y in 0..self.out_h {
                    for x in 0..self.out_w {
                        dst[y * self.stride * self.in_w + x * self.stride] = src[y * self.out_w + x];
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CompiledUnit {
    Single(usize),
    Block {
        first: usize,
        end: usize,
        shortcut: Shortcut,
    },
}

/// A validated network: one [`Linear`] per layer (head last) and the
/// residual structure over them.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layers: Vec<Linear>,
    pub units: Vec<CompiledUnit>,
    pub width: usize,
}

impl Network {
    fn compile(spec: &NetworkSpec) -> Result<Self> {
        let mut shape = spec.input.shape(1);
        if shape.numel() == 0 {
            return Err(dim_err!("input extents must be positive"));
        }
        let mut layers = Vec::new();
        let mut units = Vec::new();
        for unit in &spec.body {
            match unit {
                Unit::Layer(l) => {
                    let linear = linear_for(l, shape)?;
                    shape = linear.out_shape(1);
                    units.push(CompiledUnit::Single(layers.len()));
                    layers.push(linear);
                }
                Unit::Block { layers: block } => {
                    if !(2..=3).contains(&block.len()) {
                        return Err(Error::Config(format!(
                            "residual blocks hold 2 or 3 layers, got {}",
                            block.len()
                        )));
                    }
                    let block_in = shape;
                    let first = layers.len();
                    for l in block {
                        let linear = linear_for(l, shape)?;
                        shape = linear.out_shape(1);
                        layers.push(linear);
                    }
                    units.push(CompiledUnit::Block {
                        first,
                        end: layers.len(),
                        shortcut: Shortcut::new(block_in, shape)?,
                    });
                }
            }
        }
        if spec.head.classes == 0 {
            return Err(Error::Config("head needs at least one class".into()));
        }
        let head = match shape {
            Shape::Image { c, h, w, .. } => Linear::PoolDense {
                channels: c,
                height: h,
                width: w,
                outputs: spec.head.classes,
            },
            Shape::Matrix { cols, .. } => Linear::Dense {
                inputs: cols,
                outputs: spec.head.classes,
            },
        };
        layers.push(head);
        let width = architecture_width(&units, layers.len());
        if width > MAX_WIDTH {
            return Err(Error::Config(format!("architecture width {width} exceeds {MAX_WIDTH}")));
        }
        Ok(Network {
            spec: spec.clone(),
            layers,
            units,
            width,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn head_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        self.spec.input.shape(batch)
    }

    pub fn classes(&self) -> usize {
        self.spec.head.classes
    }

    /// Largest per-sample activation (network input, any layer input or output).
    pub fn max_sample_len(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| [l.in_shape(1).numel(), l.out_shape(1).numel()])
            .chain([self.input_shape(1).numel()])
            .max()
            .unwrap_or(0)
    }
}

fn linear_for(l: &LayerSpec, input: Shape) -> Result<Linear> {
    if l.out == 0 {
        return Err(dim_err!("layer output extent must be positive"));
    }
    match (l.kind, input) {
        (LayerKind::Conv, Shape::Image { c, h, w, .. }) => Ok(Linear::Conv(ConvGeometry::new(
            c, h, w, l.out, l.kernel, l.kernel, l.stride, l.pad,
        )?)),
        (LayerKind::Dense, Shape::Matrix { cols, .. }) => Ok(Linear::Dense {
            inputs: cols,
            outputs: l.out,
        }),
        (kind, shape) => Err(dim_err!("a {kind:?} layer cannot take input of shape {shape}")),
    }
}

/// Maximum number of layer outputs still awaiting a consumer at any layer
/// step of a sequential forward pass.
///
/// Each activation is live from the step after it is produced through its
/// last use; a block input is last used by the shortcut addition after the
/// block's final layer.
fn architecture_width(units: &[CompiledUnit], depth: usize) -> usize {
    // (produced_before_step, last_use_step) per activation; the block-end add
    // is modelled as happening at the step of the following layer.
    let mut live: Vec<(usize, usize)> = Vec::new();
    let mut step = 0;
    for unit in units {
        match *unit {
            CompiledUnit::Single(_) => {
                live.push((step, step));
                step += 1;
            }
            CompiledUnit::Block { first, end, .. } => {
                live.push((step, step + (end - first) - 1));
                step += 1;
                for _ in first + 1..end {
                    live.push((step, step));
                    step += 1;
                }
            }
        }
    }
    live.push((step, step));
    debug_assert_eq!(step + 1, depth);
    (0..depth)
        .map(|t| live.iter().filter(|&&(from, to)| from <= t && t <= to).count())
        .max()
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CIFAR: InputSpec = InputSpec::Image {
        channels: 3,
        height: 32,
        width: 32,
    };

    #[test]
    fn resnet20_layout() {
        let net = NetworkSpec::preact_resnet(CIFAR, 8, 3, 3, 10).compile().unwrap();
        assert_eq!(net.depth(), 20);
        assert_eq!(net.width, 2);
        assert_eq!(net.layers[net.head_index()].out_shape(4), Shape::matrix(4, 10));
        assert_eq!(net.max_sample_len(), 8 * 32 * 32);
    }

    #[test]
    fn widths() {
        assert_eq!(NetworkSpec::mlp(5, &[8, 8], 3).compile().unwrap().width, 1);
        assert_eq!(NetworkSpec::residual_chain(CIFAR, 4, 4, 10).compile().unwrap().width, 2);
        assert_eq!(NetworkSpec::residual_chain(CIFAR, 4, 1, 10).compile().unwrap().width, 1);
        let three = NetworkSpec::uniform_resnet(CIFAR, 4, 2, 3, 10).compile().unwrap();
        assert_eq!((three.width, three.depth()), (2, 8));
    }

    #[test]
    fn json_roundtrip_and_schema() {
        let spec = NetworkSpec::preact_resnet(CIFAR, 8, 3, 1, 10);
        assert_eq!(NetworkSpec::from_json(&spec.to_json()).unwrap(), spec);
        let text = r#"{
            "input": {"features": 4},
            "body": [{"type": "layer", "kind": "dense", "out": 6},
                     {"type": "block", "layers": [{"kind": "dense", "out": 6}, {"kind": "dense", "out": 6}]}],
            "head": {"classes": 2}
        }"#;
        let net = NetworkSpec::from_json(text).unwrap().compile().unwrap();
        assert_eq!(net.depth(), 4);
        assert_eq!(net.width, 2);
    }

    #[test]
    fn rejects_broken_chains() {
        let bad_kind = NetworkSpec {
            input: CIFAR,
            body: vec![Unit::Layer(LayerSpec::dense(4))],
            head: HeadSpec { classes: 2 },
        };
        assert!(matches!(bad_kind.compile(), Err(Error::Dimension(_))));
        let shrinking = NetworkSpec {
            input: CIFAR,
            body: vec![Unit::Block {
                layers: vec![LayerSpec::conv(2, 3, 1, 1), LayerSpec::conv(2, 3, 1, 1)],
            }],
            head: HeadSpec { classes: 2 },
        };
        assert!(matches!(shrinking.compile(), Err(Error::Dimension(_))));
        let long_block = NetworkSpec {
            input: CIFAR,
            body: vec![Unit::Block {
                layers: vec![LayerSpec::conv(3, 3, 1, 1); 4],
            }],
            head: HeadSpec { classes: 2 },
        };
        assert!(matches!(long_block.compile(), Err(Error::Config(_))));
        let odd = NetworkSpec {
            input: CIFAR,
            body: vec![Unit::Layer(LayerSpec::conv(4, 3, 2, 1))],
            head: HeadSpec { classes: 2 },
        };
        assert!(matches!(odd.compile(), Err(Error::Dimension(_))));
    }
}
