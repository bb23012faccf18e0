//! Rapid adaptation of frozen models to a shifted distribution.
//!
//! Three protocols, all fit on `adapt_train`, tuned on `adapt_val` and scored
//! on `adapt_test`:
//! * Best: the single member whose argmax predictions validate best.
//! * Ensemble: logistic regression on the members' class-1 probabilities.
//! * Linear: logistic regression on the concatenated representations.

mod logreg;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ColoredDataset, ShiftedSplits};
use crate::diffengine::{EngineError, Tensor};
use crate::nets::ModelCollection;

pub use logreg::{accuracy, fit_logreg, fit_logreg_grid, LogRegModel, GRAD_TOL, L2_GRID, MAX_ITERS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels contain a single class")]
    SingleClass,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("collection expects {expected} inputs, dataset has {actual}")]
    InputDim { expected: usize, actual: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Best,
    Ensemble,
    Linear,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Best, Protocol::Ensemble, Protocol::Linear];
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Best => "best",
            Protocol::Ensemble => "ensemble",
            Protocol::Linear => "linear",
        })
    }
}

/// Per-member representations and class-1 probabilities on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenOutputs {
    pub reps: Vec<Tensor>,
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl FrozenOutputs {
    pub fn n(&self) -> usize {
        self.reps.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Argmax predictions of member `i`.
    pub fn predictions(&self, i: usize) -> Vec<usize> {
        self.probs[i].iter().map(|&p| usize::from(p > 0.5)).collect()
    }

    /// `N×n` matrix of class-1 probabilities.
    pub fn prob_features(&self) -> Tensor {
        let n = self.n();
        let data = (0..self.len()).flat_map(|r| self.probs.iter().map(move |p| p[r])).collect();
        Tensor::matrix(self.len(), n, data).expect("nonempty outputs")
    }

    /// `N×(32n)` concatenated representations.
    pub fn rep_features(&self) -> Tensor {
        let width: usize = self.reps.iter().map(|r| r.shape()[1]).sum();
        let mut data = Vec::with_capacity(self.len() * width);
        for row in 0..self.len() {
            for r in &self.reps {
                data.extend_from_slice(r.row(row));
            }
        }
        Tensor::matrix(self.len(), width, data).expect("nonempty outputs")
    }
}

/// Pure inference of every member on `ds`.
pub fn compute_frozen_outputs(collection: &ModelCollection, ds: &ColoredDataset) -> Result<FrozenOutputs, EvalError> {
    if collection.input_dim() != ds.input_dim() {
        return Err(EvalError::InputDim {
            expected: collection.input_dim(),
            actual: ds.input_dim(),
        });
    }
    let mut reps = Vec::with_capacity(collection.n());
    let mut probs = Vec::with_capacity(collection.n());
    for m in &collection.members {
        let (h, p) = m.infer(&ds.inputs)?;
        if !h.all_finite() || !p.all_finite() {
            return Err(EvalError::NonFinite("frozen outputs".into()));
        }
        probs.push((0..p.shape()[0]).map(|r| p.row(r)[1]).collect());
        reps.push(h);
    }
    Ok(FrozenOutputs {
        reps,
        probs,
        labels: ds.labels_usize(),
    })
}

/// Frozen outputs on the three adaptation splits.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutputs {
    pub train: FrozenOutputs,
    pub val: FrozenOutputs,
    pub test: FrozenOutputs,
}

impl AdaptOutputs {
    pub fn compute(collection: &ModelCollection, splits: &ShiftedSplits) -> Result<Self, EvalError> {
        Ok(Self {
            train: compute_frozen_outputs(collection, &splits.adapt_train)?,
            val: compute_frozen_outputs(collection, &splits.adapt_val)?,
            test: compute_frozen_outputs(collection, &splits.adapt_test)?,
        })
    }
}

/// What a protocol selected on `adapt_val`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Member(usize),
    L2(f64),
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Choice::Member(i) => write!(f, "member={i}"),
            Choice::L2(l) => write!(f, "l2={l}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOutcome {
    pub protocol: Protocol,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub choice: Choice,
}

/// The member with the best validation accuracy (lowest index on ties).
pub fn protocol_best(o: &AdaptOutputs) -> ProtocolOutcome {
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..o.val.n() {
        let acc = accuracy(&o.val.predictions(i), &o.val.labels);
        if acc > best.1 {
            best = (i, acc);
        }
    }
    ProtocolOutcome {
        protocol: Protocol::Best,
        val_accuracy: best.1,
        test_accuracy: accuracy(&o.test.predictions(best.0), &o.test.labels),
        choice: Choice::Member(best.0),
    }
}

fn logreg_protocol(
    protocol: Protocol,
    o: &AdaptOutputs,
    features: impl Fn(&FrozenOutputs) -> Tensor,
    grid: &[f64],
) -> Result<ProtocolOutcome, EvalError> {
    let (model, val_accuracy) = fit_logreg_grid(
        &features(&o.train),
        &o.train.labels,
        &features(&o.val),
        &o.val.labels,
        grid,
    )?;
    Ok(ProtocolOutcome {
        protocol,
        val_accuracy,
        test_accuracy: model.accuracy(&features(&o.test), &o.test.labels),
        choice: Choice::L2(model.l2),
    })
}

pub fn protocol_ensemble(o: &AdaptOutputs, grid: &[f64]) -> Result<ProtocolOutcome, EvalError> {
    logreg_protocol(Protocol::Ensemble, o, FrozenOutputs::prob_features, grid)
}

pub fn protocol_linear(o: &AdaptOutputs, grid: &[f64]) -> Result<ProtocolOutcome, EvalError> {
    logreg_protocol(Protocol::Linear, o, FrozenOutputs::rep_features, grid)
}

/// Validation accuracy of each protocol from `adapt_train`/`adapt_val` alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationScores {
    pub best: f64,
    pub ensemble: f64,
    pub linear: f64,
}

pub fn validation_scores(
    collection: &ModelCollection,
    adapt_train: &ColoredDataset,
    adapt_val: &ColoredDataset,
) -> Result<ValidationScores, EvalError> {
    let tr = compute_frozen_outputs(collection, adapt_train)?;
    let va = compute_frozen_outputs(collection, adapt_val)?;
    let best = (0..va.n())
        .map(|i| accuracy(&va.predictions(i), &va.labels))
        .fold(f64::NEG_INFINITY, f64::max);
    let (_, ensemble) = fit_logreg_grid(&tr.prob_features(), &tr.labels, &va.prob_features(), &va.labels, &L2_GRID)?;
    let (_, linear) = fit_logreg_grid(&tr.rep_features(), &tr.labels, &va.rep_features(), &va.labels, &L2_GRID)?;
    Ok(ValidationScores { best, ensemble, linear })
}

/// Linear-protocol validation accuracy, the checkpoint criterion during training.
pub fn linear_val_accuracy(collection: &ModelCollection, adapt_train: &ColoredDataset, adapt_val: &ColoredDataset) -> Result<f64, EvalError> {
    let tr = compute_frozen_outputs(collection, adapt_train)?;
    let va = compute_frozen_outputs(collection, adapt_val)?;
    let (_, acc) = fit_logreg_grid(&tr.rep_features(), &tr.labels, &va.rep_features(), &va.labels, &L2_GRID)?;
    Ok(acc)
}

/// All three protocols on one seed's checkpoint and test condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEvaluation {
    pub seed: u64,
    pub condition: String,
    pub outcomes: Vec<ProtocolOutcome>,
}

impl SeedEvaluation {
    pub fn outcome(&self, p: Protocol) -> Option<&ProtocolOutcome> {
        self.outcomes.iter().find(|o| o.protocol == p)
    }
}

pub fn evaluate_protocols(
    collection: &ModelCollection,
    splits: &ShiftedSplits,
    seed: u64,
    condition: &str,
) -> Result<SeedEvaluation, EvalError> {
    let o = AdaptOutputs::compute(collection, splits)?;
    Ok(SeedEvaluation {
        seed,
        condition: condition.to_string(),
        outcomes: vec![
            protocol_best(&o),
            protocol_ensemble(&o, &L2_GRID)?,
            protocol_linear(&o, &L2_GRID)?,
        ],
    })
}

/// Mean and population standard deviation.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    // Shifted by the first value, so identical inputs give exactly zero spread.
    let n = v.len() as f64;
    let k = v[0];
    let d = v.iter().map(|x| x - k).sum::<f64>() / n;
    let var = v.iter().map(|x| (x - k - d) * (x - k - d)).sum::<f64>() / n;
    (k + d, var.sqrt())
}

/// One protocol under one condition, summarized across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub protocol: Protocol,
    pub condition: String,
    pub mean: f64,
    pub sd: f64,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub choices: Vec<Choice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summaries: Vec<ProtocolSummary>,
}

impl EvalReport {
    /// Groups per-seed evaluations by (condition, protocol), in first-seen condition order.
    pub fn from_seeds(evals: &[SeedEvaluation]) -> Self {
        let mut conditions: Vec<&str> = Vec::new();
        for e in evals {
            if !conditions.contains(&e.condition.as_str()) {
                conditions.push(&e.condition);
            }
        }
        let mut summaries = Vec::new();
        for cond in conditions {
            for p in Protocol::ALL {
                let hits: Vec<(u64, &ProtocolOutcome)> = evals
                    .iter()
                    .filter(|e| e.condition == cond)
                    .filter_map(|e| e.outcome(p).map(|o| (e.seed, o)))
                    .collect();
                if hits.is_empty() {
                    continue;
                }
                let accuracies: Vec<f64> = hits.iter().map(|(_, o)| o.test_accuracy).collect();
                let (mean, sd) = mean_sd(&accuracies);
                summaries.push(ProtocolSummary {
                    protocol: p,
                    condition: cond.to_string(),
                    mean,
                    sd,
                    seeds: hits.iter().map(|(s, _)| *s).collect(),
                    accuracies,
                    choices: hits.iter().map(|(_, o)| o.choice).collect(),
                });
            }
        }
        Self { summaries }
    }

    pub fn get(&self, condition: &str, p: Protocol) -> Option<&ProtocolSummary> {
        self.summaries.iter().find(|s| s.condition == condition && s.protocol == p)
    }
}
