//! Parameter containers, forward passes and the optimizer.
//!
//! Containers own plain tensors. A forward pass first binds the tensors onto a
//! tape (as trainable leaves or as constants), which is how a training step
//! decides whose parameters receive gradients.

mod checkpoint;
mod optim;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::diffengine::{EngineError, GradientMap, NodeId, Tape, Tensor};
use crate::rng::{self, Rng};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use optim::RmsProp;

pub const REPR_DIM: usize = 32;
pub const REPR_HIDDEN: [usize; 2] = [128, 64];
pub const CRITIC_HIDDEN: [usize; 2] = [256, 256];
pub const CRITIC_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-12;

/// Anything holding an ordered list of parameter tensors.
pub trait Params {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// SHA-256 over the raw parameter bits, for cheap equality checks.
    fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: NodeId) -> Result<NodeId, EngineError> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu(s) => tape.leaky_relu(x, s),
        }
    }
}

/// Fully connected layer, `y = x·W + b` with `W` of shape `in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// He-style init: `W ~ N(0, 2/fan_in)`, zero bias.
    pub fn he(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, data).expect("positive dims"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Stack of dense layers with an activation between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

/// Tape nodes of a bound [`Mlp`], in parameter order.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    nodes: Vec<(NodeId, NodeId)>,
    activation: Activation,
}

impl Mlp {
    pub fn he(widths: &[usize], activation: Activation, rng: &mut Rng) -> Self {
        let layers = widths.windows(2).map(|w| Dense::he(w[0], w[1], rng)).collect();
        Self { layers, activation }
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Self {
        let layers = widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty mlp").fan_out()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let nodes = self
            .layers
            .iter()
            .map(|l| {
                (
                    tape.leaf(l.weight.clone(), trainable),
                    tape.leaf(l.bias.clone(), trainable),
                )
            })
            .collect();
        BoundMlp {
            nodes,
            activation: self.activation,
        }
    }

    /// Forward pass with no gradient bookkeeping.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor, EngineError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let xi = tape.constant(x.clone());
        let y = b.forward(&mut tape, xi)?;
        Ok(tape.value(y).clone())
    }
}

impl Params for Mlp {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId, EngineError> {
        let mut h = x;
        for (i, &(w, b)) in self.nodes.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_bias(z, b)?;
            if i + 1 < self.nodes.len() {
                h = self.activation.apply(tape, h)?;
            }
        }
        Ok(h)
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        self.nodes.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Gradients for `nodes` in order; leaves the seed did not reach get zeros.
pub fn collect_grads(tape: &Tape, grads: &mut GradientMap, nodes: &[NodeId]) -> Vec<Tensor> {
    nodes
        .iter()
        .map(|&id| {
            grads
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))
        })
        .collect()
}

/// The representation function `h`: relu MLP `input→128→64→32`.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationModel {
    pub mlp: Mlp,
}

impl RepresentationModel {
    pub fn widths(input_dim: usize) -> [usize; 4] {
        [input_dim, REPR_HIDDEN[0], REPR_HIDDEN[1], REPR_DIM]
    }

    pub fn he(input_dim: usize, rng: &mut Rng) -> Self {
        Self {
            mlp: Mlp::he(&Self::widths(input_dim), Activation::Relu, rng),
        }
    }

    pub fn zeros(input_dim: usize) -> Self {
        Self {
            mlp: Mlp::zeros(&Self::widths(input_dim), Activation::Relu),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }
}

/// The linear head `c`: `32→2` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub layer: Dense,
}

impl LinearClassifier {
    pub fn he(rng: &mut Rng) -> Self {
        Self {
            layer: Dense::he(REPR_DIM, 2, rng),
        }
    }
}

/// One `(h_i, c_i)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub rep: RepresentationModel,
    pub clf: LinearClassifier,
}

/// A bound member: representation nodes then classifier nodes.
#[derive(Debug, Clone)]
pub struct BoundMember {
    pub rep: BoundMlp,
    pub clf: (NodeId, NodeId),
}

impl Member {
    pub fn he(input_dim: usize, rng: &mut Rng) -> Self {
        Self {
            rep: RepresentationModel::he(input_dim, rng),
            clf: LinearClassifier::he(rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMember {
        BoundMember {
            rep: self.rep.mlp.bind(tape, trainable),
            clf: (
                tape.leaf(self.clf.layer.weight.clone(), trainable),
                tape.leaf(self.clf.layer.bias.clone(), trainable),
            ),
        }
    }

    /// Representations and class probabilities for every row of `x`.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Tensor), EngineError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let xi = tape.constant(x.clone());
        let h = b.represent(&mut tape, xi)?;
        let logits = b.logits(&mut tape, h)?;
        let reps = tape.value(h).clone();
        Ok((reps, softmax_rows(tape.value(logits))))
    }
}

impl Params for Member {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.rep.mlp.tensors();
        v.extend([&self.clf.layer.weight, &self.clf.layer.bias]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.rep.mlp.tensors_mut();
        v.extend([&mut self.clf.layer.weight, &mut self.clf.layer.bias]);
        v
    }
}

impl BoundMember {
    pub fn represent(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId, EngineError> {
        self.rep.forward(tape, x)
    }

    pub fn logits(&self, tape: &mut Tape, h: NodeId) -> Result<NodeId, EngineError> {
        let z = tape.matmul(h, self.clf.0)?;
        tape.add_bias(z, self.clf.1)
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        let mut v = self.rep.nodes();
        v.extend([self.clf.0, self.clf.1]);
        v
    }
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (r, c) = logits.dims2().expect("logits are a matrix");
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::matrix(r, c, out).expect("same shape")
}

/// The n representation/classifier pairs, θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCollection {
    pub members: Vec<Member>,
}

impl ModelCollection {
    /// Member `i` draws its weights from its own stream, so a collection of
    /// `n` shares members with any larger collection under the same seed.
    pub fn init(n: usize, input_dim: usize, seed: u64) -> Self {
        assert!(n >= 1 && input_dim >= 1, "need n >= 1 and input_dim >= 1");
        let members = (0..n)
            .map(|i| Member::he(input_dim, &mut rng::stream(seed, rng::MODEL_INIT_BASE + i as u64)))
            .collect();
        Self { members }
    }

    pub fn n(&self) -> usize {
        self.members.len()
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].rep.input_dim()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<BoundMember> {
        self.members.iter().map(|m| m.bind(tape, trainable)).collect()
    }
}

impl Params for ModelCollection {
    fn tensors(&self) -> Vec<&Tensor> {
        self.members.iter().flat_map(|m| m.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.members.iter_mut().flat_map(|m| m.tensors_mut()).collect()
    }
}

/// The variational scorer `f`, φ. Each input block is L2-normalized (when
/// `normalize` is set), the blocks are concatenated and passed through a
/// leaky-relu MLP with a scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub mlp: Mlp,
    pub blocks: usize,
    pub block_dim: usize,
    pub normalize: bool,
}

#[derive(Debug, Clone)]
pub struct BoundCritic {
    pub mlp: BoundMlp,
    normalize: bool,
}

impl Critic {
    /// The critic used in training: `n·32→256→256→1`, normalized inputs.
    pub fn for_collection(n: usize, seed: u64) -> Self {
        Self::new(n, REPR_DIM, &CRITIC_HIDDEN, true, &mut rng::stream(seed, rng::CRITIC_INIT))
    }

    pub fn new(blocks: usize, block_dim: usize, hidden: &[usize], normalize: bool, rng: &mut Rng) -> Self {
        let mut widths = vec![blocks * block_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Self {
            mlp: Mlp::he(&widths, Activation::LeakyRelu(CRITIC_SLOPE), rng),
            blocks,
            block_dim,
            normalize,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundCritic {
        BoundCritic {
            mlp: self.mlp.bind(tape, trainable),
            normalize: self.normalize,
        }
    }

    /// Scores without gradient bookkeeping.
    pub fn score(&self, blocks: &[Tensor]) -> Result<Tensor, EngineError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let ids: Vec<NodeId> = blocks.iter().map(|t| tape.constant(t.clone())).collect();
        let s = b.score(&mut tape, &ids)?;
        Ok(tape.value(s).clone())
    }
}

impl Params for Critic {
    fn tensors(&self) -> Vec<&Tensor> {
        self.mlp.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.tensors_mut()
    }
}

impl BoundCritic {
    /// `batch×1` scores of the concatenated (normalized) blocks.
    pub fn score(&self, tape: &mut Tape, blocks: &[NodeId]) -> Result<NodeId, EngineError> {
        let parts = if self.normalize {
            blocks
                .iter()
                .map(|&b| tape.l2_normalize_rows(b, NORM_EPS))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            blocks.to_vec()
        };
        let x = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts)? };
        self.mlp.forward(tape, x)
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        self.mlp.nodes()
    }
}
