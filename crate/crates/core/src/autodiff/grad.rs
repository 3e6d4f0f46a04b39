use super::{Graph, GraphError, NodeId, Op, Tensor};

impl Graph {
    /// Appends nodes computing `d output / d wrt[i]` and returns their ids.
    ///
    /// The returned nodes are ordinary graph nodes, so an expression that
    /// contains them can be differentiated again.
    pub fn gradients(
        &mut self,
        output: NodeId,
        wrt: &[NodeId],
    ) -> Result<Vec<NodeId>, GraphError> {
        let out_shape = self.shape(output).to_vec();
        if !(out_shape.is_empty() || out_shape == [1]) {
            return Err(GraphError::NotScalar {
                node: output.0,
                shape: out_shape,
            });
        }

        // Only nodes between `wrt` and `output` carry adjoints.
        let frontier = output.0 + 1;
        let mut relevant = vec![false; frontier];
        for w in wrt {
            if w.0 < frontier {
                relevant[w.0] = true;
            }
        }
        for i in 0..frontier {
            if !relevant[i] {
                relevant[i] = self.nodes[i].op.inputs().iter().any(|n| relevant[n.0]);
            }
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; frontier];
        adjoint[output.0] = Some(self.constant(Tensor::full(&out_shape, 1.0)));

        for i in (0..frontier).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !relevant[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, contribution) in self.adjoint_of(NodeId(i), &op, g, &relevant)? {
                let slot = &mut adjoint[input.0];
                *slot = Some(match *slot {
                    None => contribution,
                    Some(prev) => self.add(prev, contribution)?,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(*w).to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            })
            .collect())
    }

    /// Gradient of a broadcast result summed back down to `shape`.
    fn reduce_to(&mut self, g: NodeId, shape: &[usize]) -> Result<NodeId, GraphError> {
        let gs = self.shape(g).to_vec();
        if gs == shape {
            return Ok(g);
        }
        let offset = gs.len() - shape.len();
        let axes: Vec<usize> = (0..gs.len())
            .filter(|&d| d < offset || (shape[d - offset] == 1 && gs[d] != 1))
            .collect();
        let summed = self.sum(g, &axes)?;
        self.reshape(summed, shape)
    }

    /// Broadcasts a reduced gradient back over the axes that were reduced.
    fn expand_reduced(
        &mut self,
        g: NodeId,
        axes: &[usize],
        input_shape: &[usize],
    ) -> Result<NodeId, GraphError> {
        let keep: Vec<usize> = input_shape
            .iter()
            .enumerate()
            .map(|(d, &s)| if axes.contains(&d) { 1 } else { s })
            .collect();
        let r = self.reshape(g, &keep)?;
        self.broadcast_to(r, input_shape)
    }

    /// Contributions of node `node`'s adjoint `g` to each relevant input.
    fn adjoint_of(
        &mut self,
        node: NodeId,
        op: &Op,
        g: NodeId,
        relevant: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>, GraphError> {
        let wants = |n: &NodeId| relevant[n.0];
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Input(_) | Op::Constant(_) => {}
            // Piecewise constant: zero derivative.
            Op::Step(_) | Op::ExtremeMask { .. } | Op::OneHot { .. } => {}
            Op::ArgMax(_) => return Err(GraphError::Unsupported("argmax")),
            Op::Add(a, b) => {
                if wants(a) {
                    out.push((*a, g));
                }
                if wants(b) {
                    out.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    out.push((*a, g));
                }
                if wants(b) {
                    out.push((*b, self.neg(g)));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    out.push((*a, self.mul(g, *b)?));
                }
                if wants(b) {
                    out.push((*b, self.mul(g, *a)?));
                }
            }
            Op::Div(a, b) => {
                if wants(a) {
                    out.push((*a, self.div(g, *b)?));
                }
                if wants(b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = self.div(node, *b)?;
                    let t = self.mul(g, q)?;
                    out.push((*b, self.neg(t)));
                }
            }
            Op::Neg(a) => {
                if wants(a) {
                    out.push((*a, self.neg(g)));
                }
            }
            Op::Log(a) => {
                if wants(a) {
                    out.push((*a, self.div(g, *a)?));
                }
            }
            Op::Exp(a) => {
                if wants(a) {
                    out.push((*a, self.mul(g, node)?));
                }
            }
            Op::Relu(a) => {
                if wants(a) {
                    let mask = self.step(*a);
                    out.push((*a, self.mul(g, mask)?));
                }
            }
            Op::Sum(a, axes) => {
                if wants(a) {
                    let shape = self.shape(*a).to_vec();
                    out.push((*a, self.expand_reduced(g, axes, &shape)?));
                }
            }
            Op::Mean(a, axes) => {
                if wants(a) {
                    let shape = self.shape(*a).to_vec();
                    let count: usize = axes.iter().map(|&d| shape[d]).product();
                    let e = self.expand_reduced(g, axes, &shape)?;
                    out.push((*a, self.scale(e, 1.0 / count as f64)?));
                }
            }
            Op::Max(a, axes) | Op::Min(a, axes) => {
                if wants(a) {
                    let shape = self.shape(*a).to_vec();
                    let e = self.expand_reduced(g, axes, &shape)?;
                    let mask = self.extreme_mask(*a, axes, matches!(op, Op::Max(..)))?;
                    out.push((*a, self.mul(e, mask)?));
                }
            }
            Op::MatMul(a, b) => {
                if wants(a) {
                    let bt = self.transpose(*b)?;
                    out.push((*a, self.matmul(g, bt)?));
                }
                if wants(b) {
                    let at = self.transpose(*a)?;
                    out.push((*b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => {
                if wants(a) {
                    out.push((*a, self.transpose(g)?));
                }
            }
            Op::Conv2d(x, w, geom) => {
                if wants(x) {
                    out.push((*x, self.conv2d_input_grad(g, *w, *geom)));
                }
                if wants(w) {
                    out.push((*w, self.conv2d_kernel_grad(*x, g, *geom)));
                }
            }
            Op::Conv2dInputGrad(up, w, geom) => {
                // Bilinear in (up, w): adjoints are a forward conv and a kernel correlation.
                if wants(up) {
                    out.push((*up, self.conv2d_with(g, *w, *geom)));
                }
                if wants(w) {
                    out.push((*w, self.conv2d_kernel_grad(g, *up, *geom)));
                }
            }
            Op::Conv2dKernelGrad(x, up, geom) => {
                if wants(x) {
                    out.push((*x, self.conv2d_input_grad(*up, g, *geom)));
                }
                if wants(up) {
                    out.push((*up, self.conv2d_with(*x, g, *geom)));
                }
            }
            Op::GlobalAvgPool(a) => {
                if wants(a) {
                    let shape = self.shape(*a).to_vec();
                    let e = self.expand_reduced(g, &[2, 3], &shape)?;
                    out.push((*a, self.scale(e, 1.0 / (shape[2] * shape[3]) as f64)?));
                }
            }
            Op::Reshape(a) => {
                if wants(a) {
                    let shape = self.shape(*a).to_vec();
                    out.push((*a, self.reshape(g, &shape)?));
                }
            }
            Op::Slice { input, axis, start, .. } => {
                if wants(input) {
                    let full = self.shape(*input)[*axis];
                    out.push((*input, self.unslice(g, *axis, *start, full)));
                }
            }
            Op::Unslice { input, axis, start } => {
                if wants(input) {
                    let len = self.shape(*input)[*axis];
                    out.push((*input, self.slice(g, *axis, *start, start + len)?));
                }
            }
            Op::BroadcastTo(a) => {
                if wants(a) {
                    let shape = self.shape(*a).to_vec();
                    out.push((*a, self.reduce_to(g, &shape)?));
                }
            }
            Op::Softmax(a) => {
                if wants(a) {
                    // s * (g - sum(g * s, row))
                    let gs = self.mul(g, node)?;
                    let rows = self.sum(gs, &[1])?;
                    let n = self.shape(rows)[0];
                    let rows = self.reshape(rows, &[n, 1])?;
                    let centered = self.sub(g, rows)?;
                    out.push((*a, self.mul(node, centered)?));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                if wants(logits) {
                    let (n, c) = {
                        let s = self.shape(*logits);
                        (s[0], s[1])
                    };
                    let probs = self.softmax(*logits)?;
                    let target = self.one_hot(*labels, c)?;
                    let diff = self.sub(probs, target)?;
                    let scaled = self.scale(g, 1.0 / n as f64)?;
                    out.push((*logits, self.mul(diff, scaled)?));
                }
            }
        }
        Ok(out)
    }
}
