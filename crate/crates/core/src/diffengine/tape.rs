use std::collections::HashMap;

use super::kernels;
use super::{EngineError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Operation catalog. Parameters of an op live in the variant.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// Input value. Trainable leaves receive gradients.
    Leaf { trainable: bool },
    /// `[m,k] · [k,n]`
    MatMul,
    /// `[r,c] + [c]` broadcast over rows.
    AddBias,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    LeakyRelu(f64),
    /// Each row divided by `max(‖row‖₂, eps)`.
    L2NormalizeRows { eps: f64 },
    ConcatCols,
    GatherRows(Vec<usize>),
    LogSumExp { axis: usize },
    Mean { axis: usize },
    Reshape(Vec<usize>),
    /// Mean over rows of `−log softmax(logits)[target]`.
    SoftmaxCrossEntropy(Vec<usize>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf { .. } => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::AddBias => "add_bias",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu(_) => "leaky_relu",
            OpKind::L2NormalizeRows { .. } => "l2_normalize_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::LogSumExp { .. } => "logsumexp",
            OpKind::Mean { .. } => "mean",
            OpKind::Reshape(_) => "reshape",
            OpKind::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Leaf { .. } => Some(0),
            OpKind::MatMul | OpKind::AddBias | OpKind::Add | OpKind::Sub | OpKind::Mul => Some(2),
            OpKind::ConcatCols => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug)]
struct Node {
    kind: OpKind,
    inputs: Vec<NodeId>,
    value: Tensor,
    /// Op-specific state kept for the backward rule.
    saved: Option<Tensor>,
    needs_grad: bool,
}

/// Gradients of a scalar seed with respect to trainable leaves.
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.grads.keys().copied()
    }
}

/// Append-only record of a forward computation. Node ids are topologically ordered.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.push(OpKind::Leaf { trainable }, Vec::new(), value, None, trainable)
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> &OpKind {
        &self.nodes[id.0].kind
    }

    fn push(
        &mut self,
        kind: OpKind,
        inputs: Vec<NodeId>,
        value: Tensor,
        saved: Option<Tensor>,
        needs_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            kind,
            inputs,
            value,
            saved,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluates `kind` on `inputs` and records the result.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId, EngineError> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(EngineError::Arity {
                    op: kind.name(),
                    expected: n,
                    actual: inputs.len(),
                });
            }
        }
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(EngineError::UnknownNode(bad.0));
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let mut saved = None;
        let value = match &kind {
            OpKind::Leaf { .. } => return Err(EngineError::EmptyInputs("leaf")),
            OpKind::MatMul => kernels::matmul(vals[0], vals[1], false, false)?,
            OpKind::AddBias => kernels::add_bias(vals[0], vals[1])?,
            OpKind::Add => kernels::zip_with("add", vals[0], vals[1], |a, b| a + b)?,
            OpKind::Sub => kernels::zip_with("sub", vals[0], vals[1], |a, b| a - b)?,
            OpKind::Mul => kernels::zip_with("mul", vals[0], vals[1], |a, b| a * b)?,
            OpKind::Scale(c) => vals[0].map(|v| v * c),
            OpKind::Relu => vals[0].map(|v| v.max(0.0)),
            OpKind::LeakyRelu(slope) => vals[0].map(|v| if v > 0.0 { v } else { slope * v }),
            OpKind::L2NormalizeRows { eps } => {
                let (out, norms) = kernels::l2_normalize_rows(vals[0], *eps)?;
                saved = Some(Tensor::vector(norms));
                out
            }
            OpKind::ConcatCols => kernels::concat_cols(&vals)?,
            OpKind::GatherRows(idx) => kernels::gather_rows(vals[0], idx)?,
            OpKind::LogSumExp { axis } => kernels::logsumexp_axis(vals[0], *axis)?,
            OpKind::Mean { axis } => kernels::mean_axis(vals[0], *axis)?,
            OpKind::Reshape(shape) => vals[0].reshape(shape).map_err(|_| EngineError::ShapeMismatch {
                op: "reshape",
                shapes: vec![vals[0].shape().to_vec(), shape.clone()],
            })?,
            OpKind::SoftmaxCrossEntropy(targets) => {
                let (loss, probs) = kernels::softmax_cross_entropy(vals[0], targets)?;
                saved = Some(probs);
                Tensor::scalar(loss)
            }
        };
        let needs_grad = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        Ok(self.push(kind, inputs.to_vec(), value, saved, needs_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, EngineError> {
        self.apply(OpKind::AddBias, &[x, bias])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Scale(c), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId, EngineError> {
        self.apply(OpKind::LeakyRelu(slope), &[x])
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId, eps: f64) -> Result<NodeId, EngineError> {
        self.apply(OpKind::L2NormalizeRows { eps }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, EngineError> {
        if parts.is_empty() {
            return Err(EngineError::EmptyInputs("concat_cols"));
        }
        self.apply(OpKind::ConcatCols, parts)
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId, EngineError> {
        self.apply(OpKind::GatherRows(indices), &[x])
    }

    pub fn logsumexp(&mut self, x: NodeId, axis: usize) -> Result<NodeId, EngineError> {
        self.apply(OpKind::LogSumExp { axis }, &[x])
    }

    pub fn mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Mean { axis }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, EngineError> {
        self.apply(OpKind::Reshape(shape), &[x])
    }

    /// Mean of every element, as a scalar.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        let n = self.value(x).len();
        let flat = self.reshape(x, vec![n])?;
        self.mean(flat, 0)
    }

    /// Log-sum-exp of every element, as a scalar.
    pub fn logsumexp_all(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        let n = self.value(x).len();
        let flat = self.reshape(x, vec![n])?;
        self.logsumexp(flat, 0)
    }

    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Vec<usize>,
    ) -> Result<NodeId, EngineError> {
        self.apply(OpKind::SoftmaxCrossEntropy(targets), &[logits])
    }

    /// Reverse-mode sweep from a scalar `seed`. Fan-out contributions are summed.
    pub fn backward(&self, seed: NodeId) -> Result<GradientMap, EngineError> {
        let seed_node = self.nodes.get(seed.0).ok_or(EngineError::UnknownNode(seed.0))?;
        if !seed_node.value.is_scalar() {
            return Err(EngineError::NonScalarSeed(seed_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; seed.0 + 1];
        grads[seed.0] = Some(Tensor::filled(seed_node.value.shape(), 1.0));
        let mut out = GradientMap::default();

        for idx in (0..=seed.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if let OpKind::Leaf { trainable } = node.kind {
                if trainable {
                    out.grads.insert(NodeId(idx), g);
                }
                continue;
            }
            let input_grads = self.input_grads(node, &g)?;
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian products for each input of `node` given upstream gradient `g`.
    fn input_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>, EngineError> {
        let wants = |k: usize| self.nodes[node.inputs[k].0].needs_grad;
        let val = |k: usize| &self.nodes[node.inputs[k].0].value;
        let grads = match &node.kind {
            OpKind::Leaf { .. } => Vec::new(),
            OpKind::MatMul => {
                let da = if wants(0) {
                    Some(kernels::matmul(g, val(1), false, true)?)
                } else {
                    None
                };
                let db = if wants(1) {
                    Some(kernels::matmul(val(0), g, true, false)?)
                } else {
                    None
                };
                vec![da, db]
            }
            OpKind::AddBias => vec![Some(g.clone()), Some(kernels::sum_rows(g))],
            OpKind::Add => vec![Some(g.clone()), Some(g.clone())],
            OpKind::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            OpKind::Mul => vec![
                Some(kernels::zip_with("mul", g, val(1), |a, b| a * b)?),
                Some(kernels::zip_with("mul", g, val(0), |a, b| a * b)?),
            ],
            OpKind::Scale(c) => vec![Some(g.map(|v| v * c))],
            OpKind::Relu => vec![Some(kernels::zip_with("relu", g, val(0), |gv, x| {
                if x > 0.0 {
                    gv
                } else {
                    0.0
                }
            })?)],
            OpKind::LeakyRelu(slope) => vec![Some(kernels::zip_with("leaky_relu", g, val(0), |gv, x| {
                if x > 0.0 {
                    gv
                } else {
                    slope * gv
                }
            })?)],
            OpKind::L2NormalizeRows { eps } => {
                // y = x / n with n = max(‖x‖, eps); dx = (g − y·⟨g,y⟩) / n where the norm is active.
                let y = &node.value;
                let norms = node.saved.as_ref().expect("l2 norms saved");
                let (_, c) = y.dims2().expect("rank 2");
                let x = val(0);
                let mut dx = vec![0.0; g.len()];
                for (r, &n) in norms.data().iter().enumerate() {
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let yr = &y.data()[r * c..(r + 1) * c];
                    let xr = &x.data()[r * c..(r + 1) * c];
                    let raw_norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot = if raw_norm > *eps {
                        gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>()
                    } else {
                        0.0
                    };
                    for k in 0..c {
                        dx[r * c + k] = (gr[k] - yr[k] * dot) / n;
                    }
                }
                vec![Some(Tensor::new(g.shape().to_vec(), dx)?)]
            }
            OpKind::ConcatCols => {
                let rows = node.value.dims2().expect("rank 2").0;
                let total = node.value.dims2().expect("rank 2").1;
                let mut offset = 0;
                let mut out = Vec::with_capacity(node.inputs.len());
                for k in 0..node.inputs.len() {
                    let w = val(k).dims2().expect("rank 2").1;
                    if wants(k) {
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        out.push(Some(Tensor::matrix(rows, w, part)?));
                    } else {
                        out.push(None);
                    }
                    offset += w;
                }
                out
            }
            OpKind::GatherRows(idx) => {
                vec![Some(kernels::scatter_add_rows(g, idx, val(0).shape()))]
            }
            OpKind::LogSumExp { axis } => {
                // d lse / dx = exp(x − lse), broadcast along the reduced axis.
                let x = val(0);
                let (outer, len, inner) = kernels::axis_layout(x.shape(), *axis).expect("axis checked");
                let mut dx = vec![0.0; x.len()];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            let j = (o * len + l) * inner + i;
                            let r = o * inner + i;
                            dx[j] = g.data()[r] * (x.data()[j] - node.value.data()[r]).exp();
                        }
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), dx)?)]
            }
            OpKind::Mean { axis } => {
                let x = val(0);
                let (outer, len, inner) = kernels::axis_layout(x.shape(), *axis).expect("axis checked");
                let scale = 1.0 / len as f64;
                let mut dx = vec![0.0; x.len()];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            dx[(o * len + l) * inner + i] = g.data()[o * inner + i] * scale;
                        }
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), dx)?)]
            }
            OpKind::Reshape(_) => vec![Some(g.reshape(val(0).shape())?)],
            OpKind::SoftmaxCrossEntropy(targets) => {
                let probs = node.saved.as_ref().expect("softmax saved");
                let (r, c) = probs.dims2().expect("rank 2");
                let scale = g.item() / r as f64;
                let mut dx = probs.data().to_vec();
                for (row, &t) in targets.iter().enumerate() {
                    dx[row * c + t] -= 1.0;
                }
                dx.iter_mut().for_each(|v| *v *= scale);
                vec![Some(Tensor::matrix(r, c, dx)?)]
            }
        };
        Ok(grads)
    }
}
