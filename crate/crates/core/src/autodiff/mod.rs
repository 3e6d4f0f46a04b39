//! Tape-style computation graph over `f64` tensors.
//!
//! Nodes are appended in topological order and never modified. Reverse-mode
//! differentiation ([`Graph::gradients`]) emits its adjoint computation as new
//! ordinary nodes, so a gradient can itself be differentiated again.

pub mod check;
mod grad;
pub mod kernels;
mod tensor;

use thiserror::Error;

pub use kernels::{ConvGeometry, Padding};
pub use tensor::{numel, strides, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("input `{name}` (node {node}) is not bound")]
    UnboundInput { node: usize, name: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFinite { node: usize, op: &'static str },
    #[error("log of non-positive value at node {node}")]
    LogDomain { node: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: f64, classes: usize },
    #[error("differentiated output must be a scalar, node {node} has shape {shape:?}")]
    NotScalar { node: usize, shape: Vec<usize> },
    #[error("operation `{0}` is not differentiable")]
    Unsupported(&'static str),
    #[error("node {0} is not an input")]
    NotAnInput(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Input(String),
    Constant(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Relu(NodeId),
    Sum(NodeId, Vec<usize>),
    Mean(NodeId, Vec<usize>),
    Max(NodeId, Vec<usize>),
    Min(NodeId, Vec<usize>),
    MatMul(NodeId, NodeId),
    Conv2d(NodeId, NodeId, ConvGeometry),
    GlobalAvgPool(NodeId),
    Reshape(NodeId),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: NodeId,
    },
    // Helpers that adjoints are assembled from.
    BroadcastTo(NodeId),
    Step(NodeId),
    ExtremeMask {
        input: NodeId,
        axes: Vec<usize>,
        max: bool,
    },
    Transpose(NodeId),
    Conv2dInputGrad(NodeId, NodeId, ConvGeometry),
    Conv2dKernelGrad(NodeId, NodeId, ConvGeometry),
    Unslice {
        input: NodeId,
        axis: usize,
        start: usize,
    },
    Softmax(NodeId),
    OneHot {
        labels: NodeId,
        classes: usize,
    },
    ArgMax(NodeId),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Relu(_) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Max(..) => "max",
            Op::Min(..) => "min",
            Op::MatMul(..) => "matmul",
            Op::Conv2d(..) => "conv2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::Step(_) => "step",
            Op::ExtremeMask { .. } => "extreme_mask",
            Op::Transpose(_) => "transpose",
            Op::Conv2dInputGrad(..) => "conv2d_input_grad",
            Op::Conv2dKernelGrad(..) => "conv2d_kernel_grad",
            Op::Unslice { .. } => "unslice",
            Op::Softmax(_) => "softmax",
            Op::OneHot { .. } => "one_hot",
            Op::ArgMax(_) => "argmax",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Constant(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::Conv2d(a, b, _)
            | Op::Conv2dInputGrad(a, b, _)
            | Op::Conv2dKernelGrad(a, b, _) => vec![*a, *b],
            Op::SoftmaxCrossEntropy { logits, labels } => vec![*logits, *labels],
            Op::Neg(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Relu(a)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::Max(a, _)
            | Op::Min(a, _)
            | Op::GlobalAvgPool(a)
            | Op::Reshape(a)
            | Op::BroadcastTo(a)
            | Op::Step(a)
            | Op::Transpose(a)
            | Op::Softmax(a)
            | Op::ArgMax(a) => vec![*a],
            Op::Slice { input, .. }
            | Op::ExtremeMask { input, .. }
            | Op::Unslice { input, .. } => vec![*input],
            Op::OneHot { labels, .. } => vec![*labels],
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) shape: Vec<usize>,
}

/// Append-only computation graph with cached forward values.
///
/// Single-writer: construction and evaluation take `&mut self`.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<Option<Tensor>>,
    values: Vec<Option<Tensor>>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn normalize_axes(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>, GraphError> {
    let mut axes = axes.to_vec();
    axes.sort_unstable();
    axes.dedup();
    if axes.iter().any(|&a| a >= shape.len()) {
        return Err(GraphError::ShapeMismatch(format!(
            "axes {:?} out of range for shape {:?}",
            axes, shape
        )));
    }
    Ok(axes)
}

fn label_indices(labels: &Tensor, classes: usize) -> Result<Vec<usize>, GraphError> {
    labels
        .data()
        .iter()
        .map(|&l| {
            if l >= 0.0 && l.fract() == 0.0 && (l as usize) < classes {
                Ok(l as usize)
            } else {
                Err(GraphError::LabelOutOfRange { label: l, classes })
            }
        })
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }


    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.bindings.push(None);
        self.values.push(None);
        NodeId(self.nodes.len() - 1)
    }

    // ----- leaves -----

    /// Declares an input leaf of fixed shape; bind a value with [`Graph::bind`].
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, GraphError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(GraphError::InvalidShape(shape.to_vec()));
        }
        Ok(self.push(Op::Input(name.to_string()), shape.to_vec()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    // ----- elementwise -----

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        make: fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId, GraphError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            GraphError::ShapeMismatch(format!("cannot broadcast {:?} with {:?}", sa, sb))
        })?;
        let a = if sa == shape { a } else { self.broadcast_to(a, &shape)? };
        let b = if sb == shape { b } else { self.broadcast_to(b, &shape)? };
        Ok(self.push(make(a, b), shape))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(a, b, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(a, b, Op::Div)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, GraphError> {
        let c = self.scalar(factor);
        self.mul(a, c)
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> Result<NodeId, GraphError> {
        let c = self.scalar(offset);
        self.add(a, c)
    }

    fn unary(&mut self, op: Op, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(op, shape)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Neg(a), a)
    }

    /// Natural log; evaluation fails on non-positive inputs.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log(a), a)
    }

    /// `log(a + eps)`, for callers that need a finite value at zero.
    pub fn safe_log(&mut self, a: NodeId, eps: f64) -> Result<NodeId, GraphError> {
        let shifted = self.add_scalar(a, eps)?;
        Ok(self.log(shifted))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), a)
    }

    /// `max(a, 0)`. The derivative at 0 is taken to be 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu(a), a)
    }

    /// Heaviside indicator `a > 0`; its derivative is zero everywhere.
    pub fn step(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Step(a), a)
    }

    // ----- reductions -----

    fn reduce(
        &mut self,
        a: NodeId,
        axes: &[usize],
        make: impl FnOnce(NodeId, Vec<usize>) -> Op,
    ) -> Result<NodeId, GraphError> {
        let axes = normalize_axes(self.shape(a), axes)?;
        let (shape, _) = kernels::reduce_layout(self.shape(a), &axes);
        Ok(self.push(make(a, axes), shape))
    }

    /// Sum over `axes`; the reduced dimensions are dropped.
    pub fn sum(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId, GraphError> {
        self.reduce(a, axes, Op::Sum)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.push(Op::Sum(a, axes), vec![])
    }

    pub fn mean(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId, GraphError> {
        self.reduce(a, axes, Op::Mean)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.push(Op::Mean(a, axes), vec![])
    }

    pub fn max(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId, GraphError> {
        self.reduce(a, axes, Op::Max)
    }

    pub fn min(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId, GraphError> {
        self.reduce(a, axes, Op::Min)
    }

    pub(crate) fn extreme_mask(
        &mut self,
        a: NodeId,
        axes: &[usize],
        max: bool,
    ) -> Result<NodeId, GraphError> {
        let axes = normalize_axes(self.shape(a), axes)?;
        Ok(self.unary(Op::ExtremeMask { input: a, axes, max }, a))
    }

    // ----- linear algebra -----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GraphError::ShapeMismatch(format!(
                "matmul of {:?} and {:?}",
                sa, sb
            )));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(GraphError::ShapeMismatch(format!("transpose of {:?}", s)));
        }
        let shape = vec![s[1], s[0]];
        Ok(self.push(Op::Transpose(a), shape))
    }

    // ----- convolution -----

    /// Cross-correlation of an NCHW input with an OIHW kernel.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId, GraphError> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        let mismatch =
            || GraphError::ShapeMismatch(format!("conv2d of input {:?} with kernel {:?}", si, sk));
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(mismatch());
        }
        let geom = ConvGeometry::new(si[1], sk[0], (si[2], si[3]), (sk[2], sk[3]), stride, padding)
            .ok_or_else(mismatch)?;
        Ok(self.conv2d_with(input, kernel, geom))
    }

    pub(crate) fn conv2d_with(&mut self, input: NodeId, kernel: NodeId, g: ConvGeometry) -> NodeId {
        let n = self.shape(input)[0];
        self.push(
            Op::Conv2d(input, kernel, g),
            vec![n, g.out_channels, g.out_h, g.out_w],
        )
    }

    pub(crate) fn conv2d_input_grad(&mut self, grad: NodeId, kernel: NodeId, g: ConvGeometry) -> NodeId {
        let n = self.shape(grad)[0];
        self.push(
            Op::Conv2dInputGrad(grad, kernel, g),
            vec![n, g.in_channels, g.in_h, g.in_w],
        )
    }

    pub(crate) fn conv2d_kernel_grad(&mut self, input: NodeId, grad: NodeId, g: ConvGeometry) -> NodeId {
        self.push(
            Op::Conv2dKernelGrad(input, grad, g),
            vec![g.out_channels, g.in_channels, g.kernel_h, g.kernel_w],
        )
    }

    /// Spatial mean of an NCHW tensor, giving NC.
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(GraphError::ShapeMismatch(format!("global_avg_pool of {:?}", s)));
        }
        let shape = vec![s[0], s[1]];
        Ok(self.push(Op::GlobalAvgPool(a), shape))
    }

    // ----- shape manipulation -----

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, GraphError> {
        if numel(shape) != numel(self.shape(a)) || shape.iter().any(|&d| d == 0) {
            return Err(GraphError::ShapeMismatch(format!(
                "reshape {:?} to {:?}",
                self.shape(a),
                shape
            )));
        }
        if shape == self.shape(a) {
            return Ok(a);
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(
        &mut self,
        a: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<NodeId, GraphError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(GraphError::ShapeMismatch(format!(
                "slice {}..{} on axis {} of {:?}",
                start, end, axis, s
            )));
        }
        let mut shape = s;
        shape[axis] = end - start;
        Ok(self.push(Op::Slice { input: a, axis, start, end }, shape))
    }

    pub(crate) fn unslice(&mut self, a: NodeId, axis: usize, start: usize, full: usize) -> NodeId {
        let mut shape = self.shape(a).to_vec();
        shape[axis] = full;
        self.push(Op::Unslice { input: a, axis, start }, shape)
    }

    /// Broadcasts `a` to `shape` with trailing-dimension alignment.
    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, GraphError> {
        let s = self.shape(a);
        if broadcast_shape(s, shape).as_deref() != Some(shape) {
            return Err(GraphError::ShapeMismatch(format!(
                "cannot broadcast {:?} to {:?}",
                s, shape
            )));
        }
        if s == shape {
            return Ok(a);
        }
        Ok(self.push(Op::BroadcastTo(a), shape.to_vec()))
    }

    // ----- classification -----

    /// Row-wise softmax of an NC tensor.
    pub fn softmax(&mut self, logits: NodeId) -> Result<NodeId, GraphError> {
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(GraphError::ShapeMismatch(format!("softmax of {:?}", s)));
        }
        Ok(self.unary(Op::Softmax(logits), logits))
    }

    /// Batch mean of `-log softmax(logits)[label]`. `labels` holds class indices
    /// as integral values, shape `[N]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: NodeId,
    ) -> Result<NodeId, GraphError> {
        let (sl, sy) = (self.shape(logits), self.shape(labels));
        if sl.len() != 2 || sy != [sl[0]] {
            return Err(GraphError::ShapeMismatch(format!(
                "softmax_cross_entropy of logits {:?} with labels {:?}",
                sl, sy
            )));
        }
        Ok(self.push(Op::SoftmaxCrossEntropy { logits, labels }, vec![]))
    }

    /// `[N]` class indices to an `[N, classes]` indicator matrix.
    pub fn one_hot(&mut self, labels: NodeId, classes: usize) -> Result<NodeId, GraphError> {
        let s = self.shape(labels);
        if s.len() != 1 || classes == 0 {
            return Err(GraphError::ShapeMismatch(format!("one_hot of {:?}", s)));
        }
        let shape = vec![s[0], classes];
        Ok(self.push(Op::OneHot { labels, classes }, shape))
    }

    /// Row-wise index of the largest entry. Not differentiable.
    pub fn argmax(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(GraphError::ShapeMismatch(format!("argmax of {:?}", s)));
        }
        let shape = vec![s[0]];
        Ok(self.push(Op::ArgMax(a), shape))
    }

    // ----- evaluation -----

    /// Binds a value to an input leaf. Invalidates cached values.
    pub fn bind(&mut self, input: NodeId, value: Tensor) -> Result<(), GraphError> {
        let node = &self.nodes[input.0];
        if !matches!(node.op, Op::Input(_)) {
            return Err(GraphError::NotAnInput(input.0));
        }
        if node.shape != value.shape() {
            return Err(GraphError::ShapeMismatch(format!(
                "input node {} declared {:?}, bound {:?}",
                input.0,
                node.shape,
                value.shape()
            )));
        }
        self.bindings[input.0] = Some(value);
        self.values.iter_mut().for_each(|v| *v = None);
        Ok(())
    }

    /// Binds `inputs` and evaluates `outputs`.
    pub fn eval_forward(
        &mut self,
        outputs: &[NodeId],
        inputs: &[(NodeId, Tensor)],
    ) -> Result<Vec<Tensor>, GraphError> {
        for (id, t) in inputs {
            self.bind(*id, t.clone())?;
        }
        self.eval(outputs)
    }

    /// Evaluates the requested nodes with the current bindings, reusing cached
    /// values where present.
    pub fn eval(&mut self, outputs: &[NodeId]) -> Result<Vec<Tensor>, GraphError> {
        let Some(top) = outputs.iter().map(|o| o.0).max() else {
            return Ok(vec![]);
        };
        let mut needed = vec![false; top + 1];
        let mut stack: Vec<usize> = outputs.iter().map(|o| o.0).collect();
        while let Some(i) = stack.pop() {
            if needed[i] || self.values[i].is_some() {
                continue;
            }
            needed[i] = true;
            stack.extend(self.nodes[i].op.inputs().iter().map(|n| n.0));
        }
        for i in 0..=top {
            if needed[i] {
                let value = self.compute(i)?;
                if !value.is_finite() {
                    return Err(GraphError::NonFinite {
                        node: i,
                        op: self.nodes[i].op.name(),
                    });
                }
                self.values[i] = Some(value);
            }
        }
        Ok(outputs
            .iter()
            .map(|o| self.values[o.0].clone().expect("evaluated"))
            .collect())
    }

    /// Cached value of a node from the last evaluation, if any.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values[id.0].as_ref()
    }

    fn compute(&self, i: usize) -> Result<Tensor, GraphError> {
        let v = |id: &NodeId| self.values[id.0].as_ref().expect("inputs evaluated first");
        let shape = &self.nodes[i].shape;
        let out = match &self.nodes[i].op {
            Op::Input(name) => self.bindings[i].clone().ok_or_else(|| GraphError::UnboundInput {
                node: i,
                name: name.clone(),
            })?,
            Op::Constant(t) => t.clone(),
            Op::Add(a, b) => kernels::zip(v(a), v(b), |x, y| x + y),
            Op::Sub(a, b) => kernels::zip(v(a), v(b), |x, y| x - y),
            Op::Mul(a, b) => kernels::zip(v(a), v(b), |x, y| x * y),
            Op::Div(a, b) => kernels::zip(v(a), v(b), |x, y| x / y),
            Op::Neg(a) => v(a).map(|x| -x),
            Op::Log(a) => {
                let x = v(a);
                if x.data().iter().any(|&e| e <= 0.0) {
                    return Err(GraphError::LogDomain { node: i });
                }
                x.map(f64::ln)
            }
            Op::Exp(a) => v(a).map(f64::exp),
            Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Step(a) => v(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Sum(a, axes) => kernels::sum(v(a), axes),
            Op::Mean(a, axes) => kernels::mean(v(a), axes),
            Op::Max(a, axes) => kernels::extreme(v(a), axes, true),
            Op::Min(a, axes) => kernels::extreme(v(a), axes, false),
            Op::ExtremeMask { input, axes, max } => kernels::extreme_mask(v(input), axes, *max),
            Op::MatMul(a, b) => kernels::matmul(v(a), v(b)),
            Op::Transpose(a) => kernels::transpose(v(a)),
            Op::Conv2d(x, w, g) => kernels::conv2d(v(x), v(w), g),
            Op::Conv2dInputGrad(gr, w, g) => kernels::conv2d_input_grad(v(gr), v(w), g),
            Op::Conv2dKernelGrad(x, gr, g) => kernels::conv2d_kernel_grad(v(x), v(gr), g),
            Op::GlobalAvgPool(a) => kernels::global_avg_pool(v(a)),
            Op::Reshape(a) => Tensor::from_parts(shape.clone(), v(a).data().to_vec()),
            Op::Slice { input, axis, start, end } => kernels::slice(v(input), *axis, *start, *end),
            Op::Unslice { input, axis, start } => {
                kernels::unslice(v(input), *axis, *start, shape[*axis])
            }
            Op::BroadcastTo(a) => kernels::broadcast_to(v(a), shape),
            Op::Softmax(a) => kernels::softmax_rows(v(a)),
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let l = v(logits);
                let idx = label_indices(v(labels), l.shape()[1])?;
                kernels::softmax_cross_entropy(l, &idx)
            }
            Op::OneHot { labels, classes } => {
                let idx = label_indices(v(labels), *classes)?;
                kernels::one_hot(&idx, *classes)
            }
            Op::ArgMax(a) => kernels::argmax_rows(v(a)),
        };
        debug_assert_eq!(out.shape(), shape.as_slice(), "{}", self.nodes[i].op.name());
        Ok(out)
    }
}
