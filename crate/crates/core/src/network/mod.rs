//! Small convolutional classifier: stride-2 conv blocks with relu, then dense
//! layers. Every forward pass is a [`Graph`], so logits can be differentiated
//! with respect to the target-layer activations and the parameters alike.

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Padding, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// How the last conv block is turned into dense-layer features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Flatten `[K, h, w]` into `K * h * w` features.
    Flatten,
    /// Average each channel over space, giving `K` features.
    GlobalAverage,
}

impl Pooling {
    pub fn code(self) -> u32 {
        match self {
            Pooling::Flatten => 0,
            Pooling::GlobalAverage => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Pooling::Flatten),
            1 => Some(Pooling::GlobalAverage),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_channels: usize,
    /// Square input side length.
    pub input_size: usize,
    pub conv: Vec<ConvBlock>,
    pub pooling: Pooling,
    pub dense_hidden: Vec<usize>,
    pub classes: usize,
    /// Index of the conv block whose post-relu output feeds GradCAM.
    pub target_layer: usize,
}

impl Architecture {
    /// 3 stride-2 conv blocks (8/16/32 channels, 3x3), flatten, dense 64,
    /// dense `classes`.
    /// On a 32x32 input the target map is 4x4.
    pub fn desk(classes: usize, input_size: usize) -> Self {
        let block = |channels| ConvBlock {
            channels,
            kernel: 3,
            stride: 2,
        };
        Architecture {
            input_channels: 1,
            input_size,
            conv: vec![block(8), block(16), block(32)],
            pooling: Pooling::Flatten,
            dense_hidden: vec![64],
            classes,
            target_layer: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Architecture(m.to_string()));
        if self.conv.is_empty() {
            return bad("at least one conv block is required");
        }
        if self.input_channels == 0 || self.input_size == 0 || self.classes == 0 {
            return bad("input channels, input size and classes must be positive");
        }
        if self
            .conv
            .iter()
            .any(|b| b.channels == 0 || b.kernel == 0 || b.stride == 0)
        {
            return bad("conv channels, kernel and stride must be positive");
        }
        if self.dense_hidden.iter().any(|&d| d == 0) {
            return bad("dense widths must be positive");
        }
        if self.target_layer >= self.conv.len() {
            return bad("target layer must index a conv block");
        }
        Ok(())
    }

    /// Spatial side after each conv block ("same" padding).
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut side = self.input_size;
        self.conv
            .iter()
            .map(|b| {
                side = side.div_ceil(b.stride);
                side
            })
            .collect()
    }

    /// `(channels, height, width)` of the target activations.
    pub fn target_shape(&self) -> (usize, usize, usize) {
        let s = self.spatial_sizes()[self.target_layer];
        (self.conv[self.target_layer].channels, s, s)
    }

    fn flat_features(&self) -> usize {
        let last = self.conv.len() - 1;
        let s = self.spatial_sizes()[last];
        match self.pooling {
            Pooling::Flatten => self.conv[last].channels * s * s,
            Pooling::GlobalAverage => self.conv[last].channels,
        }
    }

    /// `(name, layer index, shape)` for every parameter, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, usize, Vec<usize>)> {
        let mut out = Vec::new();
        let mut in_c = self.input_channels;
        for (l, b) in self.conv.iter().enumerate() {
            out.push((
                format!("conv{l}.weight"),
                l,
                vec![b.channels, in_c, b.kernel, b.kernel],
            ));
            out.push((format!("conv{l}.bias"), l, vec![b.channels]));
            in_c = b.channels;
        }
        let mut width = self.flat_features();
        let widths = self.dense_hidden.iter().chain(std::iter::once(&self.classes));
        for (d, &next) in widths.enumerate() {
            let layer = self.conv.len() + d;
            out.push((format!("dense{d}.weight"), layer, vec![width, next]));
            out.push((format!("dense{d}.bias"), layer, vec![next]));
            width = next;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, _, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub layer: usize,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub seed: u64,
    pub params: Vec<Parameter>,
}

impl ModelParams {
    /// Weights uniform in `+-sqrt(6 / fan_in)`, biases zero.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|(name, layer, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    let fan_in: usize = if shape.len() == 4 {
                        shape[1..].iter().product()
                    } else {
                        shape[0]
                    };
                    let limit = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
                };
                Ok(Parameter {
                    name,
                    layer,
                    value: Tensor::new(shape, data)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams {
            arch: arch.clone(),
            seed,
            params,
        })
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Replaces parameter values, keeping names and shapes.
    pub fn set_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Architecture(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Architecture(format!(
                    "parameter {} has shape {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
            p.value = v;
        }
        Ok(())
    }
}

/// One forward pass recorded in a graph.
///
/// Inputs (images and parameters) are graph leaves, so the same trace can be
/// re-bound and re-evaluated for every batch of equal size.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub graph: Graph,
    pub arch: Architecture,
    pub batch: usize,
    pub images: NodeId,
    pub params: Vec<NodeId>,
    /// Post-relu output of every conv block.
    pub conv_outputs: Vec<NodeId>,
    /// Pre-softmax class scores, `[N, C]`.
    pub logits: NodeId,
    /// Activations `A^k` of the target layer, `[N, K, h, w]`.
    pub target: NodeId,
}

fn conv_block(
    g: &mut Graph,
    x: NodeId,
    weight: NodeId,
    bias: NodeId,
    stride: usize,
) -> Result<NodeId> {
    let y = g.conv2d(x, weight, stride, Padding::Same)?;
    let c = g.shape(bias)[0];
    let b = g.reshape(bias, &[c, 1, 1])?;
    let y = g.add(y, b)?;
    Ok(g.relu(y))
}

fn pool(g: &mut Graph, arch: &Architecture, x: NodeId, batch: usize) -> Result<NodeId> {
    Ok(match arch.pooling {
        Pooling::Flatten => g.reshape(x, &[batch, arch.flat_features()])?,
        Pooling::GlobalAverage => g.global_avg_pool(x)?,
    })
}

/// Dense layers from `[N, F]` features to logits. Every hidden layer has relu.
fn dense_head(g: &mut Graph, mut x: NodeId, params: &[NodeId]) -> Result<NodeId> {
    let layers = params.len() / 2;
    for (d, pair) in params.chunks(2).enumerate() {
        let y = g.matmul(x, pair[0])?;
        let y = g.add(y, pair[1])?;
        x = if d + 1 < layers { g.relu(y) } else { y };
    }
    Ok(x)
}

impl ForwardTrace {
    /// Builds an unbound trace for batches of `batch` images.
    pub fn build(arch: &Architecture, batch: usize) -> Result<Self> {
        arch.validate()?;
        if batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut g = Graph::new();
        let images = g.input(
            "images",
            &[batch, arch.input_channels, arch.input_size, arch.input_size],
        )?;
        let params = arch
            .param_shapes()
            .iter()
            .map(|(name, _, shape)| g.input(name, shape))
            .collect::<std::result::Result<Vec<_>, _>>()?;

        let mut x = images;
        let mut conv_outputs = Vec::with_capacity(arch.conv.len());
        for (l, block) in arch.conv.iter().enumerate() {
            x = conv_block(&mut g, x, params[2 * l], params[2 * l + 1], block.stride)?;
            conv_outputs.push(x);
        }
        let flat = pool(&mut g, arch, x, batch)?;
        let logits = dense_head(&mut g, flat, &params[2 * arch.conv.len()..])?;
        let target = conv_outputs[arch.target_layer];
        Ok(ForwardTrace {
            graph: g,
            arch: arch.clone(),
            batch,
            images,
            params,
            conv_outputs,
            logits,
            target,
        })
    }

    pub fn bind_params(&mut self, params: &ModelParams) -> Result<()> {
        if params.arch.param_shapes() != self.arch.param_shapes() {
            return Err(Error::Architecture(
                "parameters do not match the trace architecture".into(),
            ));
        }
        for (id, p) in self.params.iter().zip(&params.params) {
            self.graph.bind(*id, p.value.clone())?;
        }
        Ok(())
    }

    pub fn bind_images(&mut self, images: &Tensor) -> Result<()> {
        self.graph.bind(self.images, images.clone())?;
        Ok(())
    }

    pub fn eval(&mut self, nodes: &[NodeId]) -> Result<Vec<Tensor>> {
        Ok(self.graph.eval(nodes)?)
    }

    pub fn logits(&mut self) -> Result<Tensor> {
        Ok(self.graph.eval(&[self.logits])?.remove(0))
    }

    pub fn target_activations(&mut self) -> Result<Tensor> {
        Ok(self.graph.eval(&[self.target])?.remove(0))
    }
}

/// Builds a trace for `images` (`[N, C, H, W]`) and binds `params`.
pub fn forward(params: &ModelParams, images: &Tensor) -> Result<ForwardTrace> {
    let arch = &params.arch;
    let s = images.shape();
    if s.len() != 4 || s[1] != arch.input_channels || s[2] != arch.input_size || s[3] != arch.input_size {
        return Err(Error::Graph(crate::autodiff::GraphError::ShapeMismatch(format!(
            "images {:?} do not match input [N, {}, {}, {}]",
            s, arch.input_channels, arch.input_size, arch.input_size
        ))));
    }
    let mut trace = ForwardTrace::build(arch, s[0])?;
    trace.bind_params(params)?;
    trace.bind_images(images)?;
    Ok(trace)
}

/// The part of the network after the target layer, as a standalone graph fed
/// by given target activations. Used to perturb `A^k` directly.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub graph: Graph,
    pub activations: NodeId,
    pub logits: NodeId,
}

impl HeadTrace {
    pub fn build(params: &ModelParams, batch: usize) -> Result<Self> {
        let arch = &params.arch;
        let (k, h, w) = arch.target_shape();
        let mut g = Graph::new();
        let activations = g.input("activations", &[batch, k, h, w])?;
        let consts: Vec<NodeId> = params
            .params
            .iter()
            .map(|p| g.constant(p.value.clone()))
            .collect();
        let mut x = activations;
        for l in arch.target_layer + 1..arch.conv.len() {
            x = conv_block(&mut g, x, consts[2 * l], consts[2 * l + 1], arch.conv[l].stride)?;
        }
        let flat = pool(&mut g, arch, x, batch)?;
        let logits = dense_head(&mut g, flat, &consts[2 * arch.conv.len()..])?;
        Ok(HeadTrace {
            graph: g,
            activations,
            logits,
        })
    }

    pub fn logits(&mut self, activations: &Tensor) -> Result<Tensor> {
        Ok(self
            .graph
            .eval_forward(&[self.logits], &[(self.activations, activations.clone())])?
            .remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Architecture {
        Architecture {
            input_channels: 1,
            input_size: 8,
            conv: vec![
                ConvBlock { channels: 2, kernel: 3, stride: 2 },
                ConvBlock { channels: 3, kernel: 3, stride: 1 },
            ],
            pooling: Pooling::Flatten,
            dense_hidden: vec![5],
            classes: 3,
            target_layer: 1,
        }
    }

    #[test]
    fn desk_parameter_count_is_analytic() {
        let arch = Architecture::desk(4, 32);
        let conv = (8 * 9 + 8) + (16 * 8 * 9 + 16) + (32 * 16 * 9 + 32);
        let dense = (32 * 4 * 4 * 64 + 64) + (64 * 4 + 4);
        assert_eq!(arch.param_count(), conv + dense);
        let params = ModelParams::init(&arch, 1).unwrap();
        assert_eq!(params.count(), conv + dense);
        assert_eq!(arch.target_shape(), (32, 4, 4));

        let pooled = Architecture { pooling: Pooling::GlobalAverage, ..arch };
        let dense = (32 * 64 + 64) + (64 * 4 + 4);
        assert_eq!(pooled.param_count(), conv + dense);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let arch = tiny();
        let a = ModelParams::init(&arch, 7).unwrap();
        let b = ModelParams::init(&arch, 7).unwrap();
        let c = ModelParams::init(&arch, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.params.iter().filter(|p| p.name.ends_with("bias")).all(|p| p.value.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn invalid_architectures_are_rejected() {
        let mut arch = tiny();
        arch.conv.clear();
        assert!(ModelParams::init(&arch, 0).is_err());
        let mut arch = tiny();
        arch.dense_hidden = vec![0];
        assert!(ModelParams::init(&arch, 0).is_err());
        let mut arch = tiny();
        arch.target_layer = 2;
        assert!(ModelParams::init(&arch, 0).is_err());
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let arch = tiny();
        let mut params = ModelParams::init(&arch, 0).unwrap();
        let values = params
            .params
            .iter()
            .map(|p| {
                if p.name == "dense1.bias" {
                    Tensor::vector(vec![0.5, -1.0, 2.0])
                } else {
                    Tensor::zeros(p.value.shape())
                }
            })
            .collect();
        params.set_values(values).unwrap();
        let images = Tensor::full(&[2, 1, 8, 8], 0.3);
        let logits = forward(&params, &images).unwrap().logits().unwrap();
        assert_eq!(logits.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn trace_shapes() {
        let params = ModelParams::init(&tiny(), 3).unwrap();
        let mut trace = forward(&params, &Tensor::full(&[4, 1, 8, 8], 0.1)).unwrap();
        assert_eq!(trace.logits().unwrap().shape(), &[4, 3]);
        assert_eq!(trace.target_activations().unwrap().shape(), &[4, 3, 4, 4]);
    }

    #[test]
    fn image_shape_mismatch_is_rejected() {
        let params = ModelParams::init(&tiny(), 3).unwrap();
        assert!(forward(&params, &Tensor::full(&[1, 1, 9, 9], 0.1)).is_err());
    }

    #[test]
    fn head_reproduces_full_forward() {
        let params = ModelParams::init(&tiny(), 5).unwrap();
        let images = Tensor::new(
            vec![2, 1, 8, 8],
            (0..128).map(|i| ((i * 37) % 17) as f64 / 17.0).collect(),
        )
        .unwrap();
        let mut trace = forward(&params, &images).unwrap();
        let full = trace.logits().unwrap();
        let acts = trace.target_activations().unwrap();
        let mut head = HeadTrace::build(&params, 2).unwrap();
        assert_eq!(head.logits(&acts).unwrap(), full);
    }
}
