//! Adversarial alternating training of a model collection against a TC critic.
//!
//! Each model step minimizes `Σ_i CE_i + β·TC-hat` over θ with the critic
//! frozen; each critic step maximizes TC-hat over φ with the collection frozen.
//! The critic runs `critic_steps_per_model_step` times before every model step
//! and draws its own minibatches.

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{ColoredDataset, DataError, Variant};
use crate::diffengine::{EngineError, NodeId, Tape, Tensor};
use crate::eval::{self, EvalError};
use crate::nets::{collect_grads, Critic, ModelCollection, Params, RmsProp};
use crate::rng::{self, Rng};
use crate::tcest::{critic_ascent_step, grouped_tc_nce_on_tape, EstimatorBatch, EstimatorError, Grouping};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        step: usize,
        records: Vec<MetricsRecord>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_models: usize,
    pub beta: f64,
    pub batch_size: usize,
    pub m: usize,
    pub epochs: usize,
    pub critic_steps_per_model_step: usize,
    pub lr: f64,
    pub conditional: bool,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_models: 2,
            beta: 10.0,
            batch_size: 256,
            m: 64,
            epochs: 250,
            critic_steps_per_model_step: 1,
            lr: 1e-5,
            conditional: true,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for a variant: TC-MNIST trains longer with five critic steps per model step.
    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::TcMnist => Self {
                n_models: 3,
                epochs: 500,
                critic_steps_per_model_step: 5,
                ..Self::default()
            },
            _ => Self::default(),
        }
    }

    /// The single-model, no-critic baseline.
    pub fn erm(&self) -> Self {
        Self {
            n_models: 1,
            beta: 0.0,
            ..self.clone()
        }
    }

    pub fn grouping(&self) -> Grouping {
        if self.conditional {
            Grouping::Conditional
        } else {
            Grouping::Unconditional
        }
    }

    /// The critic runs only for collections of two or more members.
    pub fn uses_critic(&self) -> bool {
        self.n_models >= 2
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.n_models == 0 {
            return fail("n_models must be >= 1".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if self.batch_size < 2 {
            return fail(format!("batch size must be >= 2, got {}", self.batch_size));
        }
        if self.m == 0 {
            return fail("M must be >= 1".into());
        }
        if self.critic_steps_per_model_step == 0 {
            return fail("critic steps per model step must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Shuffled minibatches of `batch` row indices over `n` rows. A new
/// permutation is drawn whenever fewer than `batch` rows remain.
#[derive(Debug, Clone)]
pub struct Loader {
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Loader {
    pub fn new(n: usize, batch: usize, rng: Rng) -> Self {
        let batch = batch.min(n);
        let mut l = Self {
            rng,
            order: (0..n).collect(),
            pos: n,
            batch,
        };
        l.reshuffle_if_needed();
        l
    }

    fn reshuffle_if_needed(&mut self) {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        self.reshuffle_if_needed();
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }

    /// Full batches per pass.
    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.batch
    }
}

/// Adaptation data of one test condition, used to validate each epoch.
#[derive(Debug, Clone, Copy)]
pub struct ValidationTarget<'a> {
    pub condition: &'a str,
    pub adapt_train: &'a ColoredDataset,
    pub adapt_val: &'a ColoredDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub condition: String,
    pub best: f64,
    pub ensemble: f64,
    pub linear: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    /// Mean TC-hat over the epoch's critic steps; absent without a critic.
    pub tc_hat: Option<f64>,
    pub skipped_critic_steps: usize,
    pub validation: Vec<ValRecord>,
}

/// Parameters of the epoch that validated best for one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct BestCheckpoint {
    pub condition: String,
    pub epoch: usize,
    pub val_accuracy: f64,
    pub collection: ModelCollection,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub collection: ModelCollection,
    pub critic: Option<Critic>,
    pub model_opt: RmsProp,
    pub critic_opt: Option<RmsProp>,
    pub epoch: usize,
    pub best: Vec<BestCheckpoint>,
    pub records: Vec<MetricsRecord>,
    model_loader: Option<Loader>,
    critic_loader: Option<Loader>,
    model_plans: Rng,
    critic_plans: Rng,
}

impl TrainState {
    /// Fresh collection and critic drawn from the config seed.
    pub fn new(cfg: &TrainConfig, input_dim: usize) -> Result<Self, TrainError> {
        cfg.validate()?;
        let collection = ModelCollection::init(cfg.n_models, input_dim, cfg.rng_seed);
        Self::from_collection(cfg, collection)
    }

    /// Starts from a given collection. Its size overrides `cfg.n_models`.
    pub fn from_collection(cfg: &TrainConfig, collection: ModelCollection) -> Result<Self, TrainError> {
        let cfg = TrainConfig {
            n_models: collection.n(),
            ..cfg.clone()
        };
        cfg.validate()?;
        let critic = cfg.uses_critic().then(|| Critic::for_collection(cfg.n_models, cfg.rng_seed));
        let model_opt = RmsProp::new(cfg.lr, &collection.tensors());
        let critic_opt = critic.as_ref().map(|c| RmsProp::new(cfg.lr, &c.tensors()));
        Ok(Self {
            model_plans: rng::stream(cfg.rng_seed, rng::MODEL_PLANS),
            critic_plans: rng::stream(cfg.rng_seed, rng::CRITIC_PLANS),
            cfg,
            collection,
            critic,
            model_opt,
            critic_opt,
            epoch: 0,
            best: Vec::new(),
            records: Vec::new(),
            model_loader: None,
            critic_loader: None,
        })
    }

    /// One ascent step of the critic on `rows`; θ is only read. Returns the
    /// estimate before the step, or `None` when the batch has no usable label
    /// group (the step is skipped).
    pub fn critic_step(&mut self, data: &ColoredDataset, rows: &[usize]) -> Result<Option<f64>, TrainError> {
        let (Some(critic), Some(opt)) = (self.critic.as_mut(), self.critic_opt.as_mut()) else {
            return Ok(None);
        };
        let (x, y) = data.batch(rows)?;
        let reps = self
            .collection
            .members
            .iter()
            .map(|m| m.rep.mlp.infer(&x))
            .collect::<Result<Vec<_>, _>>()?;
        let batch = EstimatorBatch { reps, labels: y };
        match critic_ascent_step(critic, opt, &batch, self.cfg.grouping(), self.cfg.m, &mut self.critic_plans) {
            Ok(v) => Ok(Some(v)),
            Err(EstimatorError::NoValidGroup) => {
                warn!("critic step skipped: batch has no label group of size >= 2");
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }

    /// One descent step of the collection on `rows`; φ is only read. Returns
    /// per-member cross-entropy and accuracy on the batch.
    pub fn model_step(&mut self, data: &ColoredDataset, rows: &[usize]) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
        let (x, y) = data.batch(rows)?;
        let mut tape = Tape::new();
        let obj = model_objective(&mut tape, &self.collection, self.critic.as_ref(), &self.cfg, x, &y, &mut self.model_plans)?;
        if !tape.value(obj.loss).item().is_finite() {
            return Err(TrainError::NonFinite {
                what: "model loss",
                epoch: self.epoch,
                step: 0,
                records: self.records.clone(),
            });
        }
        let mut grads = tape.backward(obj.loss)?;
        let g = collect_grads(&tape, &mut grads, &obj.theta);
        self.model_opt.step(self.collection.tensors_mut(), &g);
        Ok((obj.ce, obj.accuracy))
    }

    /// One epoch: a pass of model steps over `train`, each preceded by the
    /// configured number of critic steps, then validation on every target.
    pub fn run_epoch(&mut self, train: &ColoredDataset, targets: &[ValidationTarget]) -> Result<&MetricsRecord, TrainError> {
        let seed = self.cfg.rng_seed;
        let k = self.cfg.batch_size;
        let ml = self
            .model_loader
            .get_or_insert_with(|| Loader::new(train.len(), k, rng::stream(seed, rng::MODEL_LOADER)))
            .clone();
        let mut model_loader = ml;
        let mut critic_loader = self
            .critic_loader
            .take()
            .unwrap_or_else(|| Loader::new(train.len(), k, rng::stream(seed, rng::CRITIC_LOADER)));
        let steps = model_loader.batches_per_epoch();
        let n = self.collection.n();
        let mut loss_sum = vec![0.0; n];
        let mut acc_sum = vec![0.0; n];
        let (mut tc_sum, mut tc_count, mut skipped) = (0.0, 0usize, 0usize);
        self.epoch += 1;
        for step in 0..steps {
            if self.critic.is_some() {
                for _ in 0..self.cfg.critic_steps_per_model_step {
                    let rows = critic_loader.next_batch();
                    match self.critic_step(train, &rows)? {
                        Some(v) if v.is_finite() => {
                            tc_sum += v;
                            tc_count += 1;
                        }
                        Some(_) => {
                            return Err(TrainError::NonFinite {
                                what: "TC-hat",
                                epoch: self.epoch,
                                step,
                                records: self.records.clone(),
                            })
                        }
                        None => skipped += 1,
                    }
                }
            }
            let rows = model_loader.next_batch();
            let (losses, accs) = self.model_step(train, &rows).map_err(|e| match e {
                TrainError::NonFinite { what, epoch, records, .. } => TrainError::NonFinite { what, epoch, step, records },
                other => other,
            })?;
            for i in 0..n {
                loss_sum[i] += losses[i];
                acc_sum[i] += accs[i];
            }
        }
        self.model_loader = Some(model_loader);
        self.critic_loader = Some(critic_loader);
        let denom = steps.max(1) as f64;
        let validation = self.validate_on(targets)?;
        let record = MetricsRecord {
            epoch: self.epoch,
            train_loss: loss_sum.iter().map(|v| v / denom).collect(),
            train_accuracy: acc_sum.iter().map(|v| v / denom).collect(),
            tc_hat: (tc_count > 0).then(|| tc_sum / tc_count as f64),
            skipped_critic_steps: skipped,
            validation,
        };
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    /// Validation accuracies per target; the Linear one updates the best
    /// checkpoints (strict improvement only, so ties keep the earlier epoch).
    fn validate_on(&mut self, targets: &[ValidationTarget]) -> Result<Vec<ValRecord>, TrainError> {
        let mut out = Vec::with_capacity(targets.len());
        for t in targets {
            let v = eval::validation_scores(&self.collection, t.adapt_train, t.adapt_val)?;
            let acc = v.linear;
            out.push(ValRecord {
                condition: t.condition.to_string(),
                best: v.best,
                ensemble: v.ensemble,
                linear: v.linear,
            });
            match self.best.iter_mut().find(|b| b.condition == t.condition) {
                Some(b) if acc <= b.val_accuracy => {}
                Some(b) => {
                    b.epoch = self.epoch;
                    b.val_accuracy = acc;
                    b.collection = self.collection.clone();
                }
                None => self.best.push(BestCheckpoint {
                    condition: t.condition.to_string(),
                    epoch: self.epoch,
                    val_accuracy: acc,
                    collection: self.collection.clone(),
                }),
            }
        }
        Ok(out)
    }

    pub fn best_for(&self, condition: &str) -> Option<&BestCheckpoint> {
        self.best.iter().find(|b| b.condition == condition)
    }

    /// Digest of θ, for isolation checks.
    pub fn theta_digest(&self) -> [u8; 32] {
        self.collection.digest()
    }

    /// Digest of φ; all zeros without a critic.
    pub fn phi_digest(&self) -> [u8; 32] {
        self.critic.as_ref().map_or([0; 32], |c| c.digest())
    }
}

struct ModelObjective {
    loss: NodeId,
    theta: Vec<NodeId>,
    phi: Vec<NodeId>,
    ce: Vec<f64>,
    accuracy: Vec<f64>,
}

/// `Σ_i CE_i + β·TC-hat` on one batch with θ trainable and φ constant. The TC
/// term is dropped when β is zero, there is no critic, or no label group of
/// size two exists.
fn model_objective(
    tape: &mut Tape,
    collection: &ModelCollection,
    critic: Option<&Critic>,
    cfg: &TrainConfig,
    x: Tensor,
    y: &[usize],
    plans: &mut Rng,
) -> Result<ModelObjective, TrainError> {
    build_objective(tape, collection, critic, false, cfg, x, y, plans)
}

#[allow(clippy::too_many_arguments)]
fn build_objective(
    tape: &mut Tape,
    collection: &ModelCollection,
    critic: Option<&Critic>,
    critic_trainable: bool,
    cfg: &TrainConfig,
    x: Tensor,
    y: &[usize],
    plans: &mut Rng,
) -> Result<ModelObjective, TrainError> {
    let bound = collection.bind(tape, true);
    let xi = tape.constant(x);
    let mut reps = Vec::with_capacity(bound.len());
    let mut ce = Vec::with_capacity(bound.len());
    let mut accs = Vec::with_capacity(bound.len());
    let mut total: Option<NodeId> = None;
    for b in &bound {
        let h = b.represent(tape, xi)?;
        let logits = b.logits(tape, h)?;
        accs.push(batch_accuracy(tape.value(logits), y));
        let l = tape.softmax_cross_entropy(logits, y.to_vec())?;
        ce.push(tape.value(l).item());
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
        reps.push(h);
    }
    let mut loss = total.expect("at least one member");
    let mut phi = Vec::new();
    if let (Some(critic), true) = (critic, cfg.beta > 0.0) {
        let bc = critic.bind(tape, critic_trainable);
        phi = bc.nodes();
        match grouped_tc_nce_on_tape(tape, &bc, &reps, y, cfg.grouping(), cfg.m, plans) {
            Ok(tc) => {
                let weighted = tape.scale(tc, cfg.beta)?;
                loss = tape.add(loss, weighted)?;
            }
            Err(EstimatorError::NoValidGroup) => {
                warn!("model step without the TC term: batch has no label group of size >= 2");
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(ModelObjective {
        loss,
        theta: bound.iter().flat_map(|b| b.nodes()).collect(),
        phi,
        ce,
        accuracy: accs,
    })
}

/// Value of the training objective and its gradients with respect to every
/// θ tensor and every φ tensor, in [`Params::tensors`] order. `plans` fixes
/// the permutations, so repeated calls with clones of it evaluate the same
/// function.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGradients {
    pub value: f64,
    pub theta: Vec<Tensor>,
    pub phi: Vec<Tensor>,
}

pub fn objective_gradients(
    collection: &ModelCollection,
    critic: Option<&Critic>,
    cfg: &TrainConfig,
    x: Tensor,
    y: &[usize],
    plans: &mut Rng,
) -> Result<ObjectiveGradients, TrainError> {
    let mut tape = Tape::new();
    let obj = build_objective(&mut tape, collection, critic, true, cfg, x, y, plans)?;
    let mut grads = tape.backward(obj.loss)?;
    Ok(ObjectiveGradients {
        value: tape.value(obj.loss).item(),
        theta: collect_grads(&tape, &mut grads, &obj.theta),
        phi: collect_grads(&tape, &mut grads, &obj.phi),
    })
}

/// Value of the training objective only.
pub fn objective_value(
    collection: &ModelCollection,
    critic: Option<&Critic>,
    cfg: &TrainConfig,
    x: Tensor,
    y: &[usize],
    plans: &mut Rng,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let obj = model_objective(&mut tape, collection, critic, cfg, x, y, plans)?;
    Ok(tape.value(obj.loss).item())
}

fn batch_accuracy(logits: &Tensor, y: &[usize]) -> f64 {
    let hits = y
        .iter()
        .enumerate()
        .filter(|(r, &t)| {
            let row = logits.row(*r);
            usize::from(row[1] > row[0]) == t
        })
        .count();
    hits as f64 / y.len().max(1) as f64
}

/// Index of the highest score; the earliest wins ties. `None` for an empty series.
pub fn checkpoint_select(series: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in series.iter().enumerate() {
        if best.map_or(true, |b| v > series[b]) {
            best = Some(i);
        }
    }
    best
}

/// Runs `cfg.epochs` epochs from `state`, calling `on_epoch` after each.
pub fn train_from(
    mut state: TrainState,
    train: &ColoredDataset,
    targets: &[ValidationTarget],
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainState, TrainError> {
    if train.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    if state.cfg.epochs == 0 {
        // Nothing to train: the initial parameters are the only candidate.
        let validation = state.validate_on(targets)?;
        state.records.push(MetricsRecord {
            epoch: 0,
            train_loss: Vec::new(),
            train_accuracy: Vec::new(),
            tc_hat: None,
            skipped_critic_steps: 0,
            validation,
        });
        on_epoch(state.records.last().expect("just pushed"));
        return Ok(state);
    }
    for _ in 0..state.cfg.epochs {
        let rec = state.run_epoch(train, targets)?;
        on_epoch(rec);
    }
    Ok(state)
}

/// Trains a fresh collection per `cfg` (the critic loop runs when `n ≥ 2`).
pub fn train_collection(
    train: &ColoredDataset,
    targets: &[ValidationTarget],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainState, TrainError> {
    let state = TrainState::new(cfg, train.input_dim())?;
    train_from(state, train, targets, on_epoch)
}

/// The single-model baseline: `n = 1`, `β = 0`, no critic.
pub fn train_erm_baseline(
    train: &ColoredDataset,
    targets: &[ValidationTarget],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainState, TrainError> {
    train_collection(train, targets, &cfg.erm(), on_epoch)
}

#[cfg(test)]
mod tests;
