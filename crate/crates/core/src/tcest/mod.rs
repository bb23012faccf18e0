//! Variational estimators of (conditional) total correlation and the exact
//! oracles used to check them.
//!
//! TC-hat contrasts critic scores of the `K` joint tuples in a batch against
//! `M` tuples whose coordinates were resampled independently from the batch:
//!
//! ```text
//! TC-hat = mean_i f(x_i1..x_in) − log( (1/M) Σ_j exp f(x_{π1j,1}..x_{πnj,n}) )
//! ```
//!
//! The denominator is shared by every `i`. The conditional form applies the
//! same contrast within each label group of the batch and weights groups by
//! their size.

mod oracle;
pub mod synthetic;

use rand::Rng as _;
use thiserror::Error;

use crate::diffengine::{EngineError, NodeId, Tape, Tensor};
use crate::nets::{collect_grads, BoundCritic, Critic, Mlp, Params, RmsProp};
use crate::rng::Rng;

pub use oracle::{
    discrete_conditional_tc_oracle, discrete_tc_oracle, gaussian_mi_oracle, ConditionalJoint,
    DiscreteJoint, OracleError,
};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("batch has no label group of size >= 2")]
    NoValidGroup,
    #[error("need K >= 2 and M >= 1, got K={k}, M={m}")]
    BadSize { k: usize, m: usize },
    #[error("{labels} labels for a batch of {rows}")]
    LabelCount { labels: usize, rows: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// `M` resampled tuples; `indices[j*n + k]` is the batch row used for
/// coordinate `k` of tuple `j`. Rows are zero-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationPlan {
    pub k: usize,
    pub n: usize,
    pub m: usize,
    pub indices: Vec<usize>,
}

impl PermutationPlan {
    /// Every index drawn uniformly from `0..k`, independently per tuple and coordinate.
    pub fn draw(k: usize, n: usize, m: usize, rng: &mut Rng) -> Self {
        let indices = (0..m * n).map(|_| rng.gen_range(0..k)).collect();
        Self { k, n, m, indices }
    }

    /// Batch rows feeding coordinate `coord`, one per tuple.
    pub fn column(&self, coord: usize) -> Vec<usize> {
        (0..self.m).map(|j| self.indices[j * self.n + coord]).collect()
    }
}

/// Whether the contrast runs per label group or over the whole batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Grouping {
    Conditional,
    Unconditional,
}

/// Sample tuples for the estimator: `n` blocks of `K` rows and the labels of those rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorBatch {
    pub reps: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl EstimatorBatch {
    pub fn rows(&self) -> usize {
        self.reps[0].shape()[0]
    }
}

/// Row groups with at least two members, ordered by label.
pub fn label_groups(labels: &[usize], grouping: Grouping) -> Vec<Vec<usize>> {
    let groups: Vec<Vec<usize>> = match grouping {
        Grouping::Unconditional => vec![(0..labels.len()).collect()],
        Grouping::Conditional => {
            let max = labels.iter().copied().max().unwrap_or(0);
            let mut g = vec![Vec::new(); max + 1];
            for (row, &l) in labels.iter().enumerate() {
                g[l].push(row);
            }
            g
        }
    };
    groups.into_iter().filter(|g| g.len() >= 2).collect()
}

/// One group's plan expressed in batch rows.
struct GroupPlan {
    rows: Vec<usize>,
    plan: PermutationPlan,
}

fn group_plans(labels: &[usize], grouping: Grouping, m: usize, rng: &mut Rng, n: usize) -> Result<Vec<GroupPlan>, EstimatorError> {
    let groups = label_groups(labels, grouping);
    if groups.is_empty() {
        return Err(EstimatorError::NoValidGroup);
    }
    Ok(groups
        .into_iter()
        .map(|rows| {
            let m_g = match grouping {
                Grouping::Unconditional => m,
                Grouping::Conditional => m.min(rows.len()),
            };
            let plan = PermutationPlan::draw(rows.len(), n, m_g, rng);
            GroupPlan { rows, plan }
        })
        .collect())
}

/// TC-hat over explicit groups, recorded on the tape. Returns a scalar node.
fn grouped_tc_nce(
    tape: &mut Tape,
    critic: &BoundCritic,
    reps: &[NodeId],
    groups: &[GroupPlan],
) -> Result<NodeId, EstimatorError> {
    let joint = critic.score(tape, reps)?;
    // All resampled tuples go through the critic in one pass.
    let mut perm_blocks = Vec::with_capacity(reps.len());
    for (coord, &r) in reps.iter().enumerate() {
        let idx: Vec<usize> = groups
            .iter()
            .flat_map(|g| g.plan.column(coord).into_iter().map(|j| g.rows[j]))
            .collect();
        perm_blocks.push(tape.gather_rows(r, idx)?);
    }
    let perm = critic.score(tape, &perm_blocks)?;

    let total: usize = groups.iter().map(|g| g.rows.len()).sum();
    let mut acc: Option<NodeId> = None;
    let mut offset = 0;
    for g in groups {
        let js = tape.gather_rows(joint, g.rows.clone())?;
        let mean = tape.mean_all(js)?;
        let ps = tape.gather_rows(perm, (offset..offset + g.plan.m).collect())?;
        offset += g.plan.m;
        let lse = tape.logsumexp_all(ps)?;
        let diff = tape.sub(mean, lse)?;
        let log_m = tape.constant(Tensor::scalar((g.plan.m as f64).ln()));
        let est = tape.add(diff, log_m)?;
        let weighted = if groups.len() == 1 {
            est
        } else {
            tape.scale(est, g.rows.len() as f64 / total as f64)?
        };
        acc = Some(match acc {
            None => weighted,
            Some(a) => tape.add(a, weighted)?,
        });
    }
    Ok(acc.expect("at least one group"))
}

/// TC-hat of the blocks `reps` under a given plan, on the tape.
pub fn tc_nce_on_tape(
    tape: &mut Tape,
    critic: &BoundCritic,
    reps: &[NodeId],
    plan: &PermutationPlan,
) -> Result<NodeId, EstimatorError> {
    let k = tape.value(reps[0]).shape()[0];
    if k < 2 || plan.m == 0 || plan.k != k {
        return Err(EstimatorError::BadSize { k, m: plan.m });
    }
    let g = GroupPlan {
        rows: (0..k).collect(),
        plan: plan.clone(),
    };
    grouped_tc_nce(tape, critic, reps, &[g])
}

/// TC-hat with plans drawn from `rng`: per label group (conditional) or over
/// the whole batch (unconditional). In the conditional case each group uses
/// `min(M, group size)` resampled tuples; groups of one are skipped.
pub fn grouped_tc_nce_on_tape(
    tape: &mut Tape,
    critic: &BoundCritic,
    reps: &[NodeId],
    labels: &[usize],
    grouping: Grouping,
    m: usize,
    rng: &mut Rng,
) -> Result<NodeId, EstimatorError> {
    let k = tape.value(reps[0]).shape()[0];
    if labels.len() != k {
        return Err(EstimatorError::LabelCount {
            labels: labels.len(),
            rows: k,
        });
    }
    if k < 2 || m == 0 {
        return Err(EstimatorError::BadSize { k, m });
    }
    let groups = group_plans(labels, grouping, m, rng, reps.len())?;
    grouped_tc_nce(tape, critic, reps, &groups)
}

fn bind_batch(tape: &mut Tape, batch: &EstimatorBatch) -> Vec<NodeId> {
    batch.reps.iter().map(|t| tape.constant(t.clone())).collect()
}

pub fn tc_nce_estimate(critic: &Critic, batch: &EstimatorBatch, plan: &PermutationPlan) -> Result<f64, EstimatorError> {
    let mut tape = Tape::new();
    let c = critic.bind(&mut tape, false);
    let reps = bind_batch(&mut tape, batch);
    let out = tc_nce_on_tape(&mut tape, &c, &reps, plan)?;
    Ok(tape.value(out).item())
}

pub fn conditional_tc_nce_estimate(critic: &Critic, batch: &EstimatorBatch, m: usize, rng: &mut Rng) -> Result<f64, EstimatorError> {
    grouped_estimate(critic, batch, Grouping::Conditional, m, rng)
}

pub fn grouped_estimate(
    critic: &Critic,
    batch: &EstimatorBatch,
    grouping: Grouping,
    m: usize,
    rng: &mut Rng,
) -> Result<f64, EstimatorError> {
    let mut tape = Tape::new();
    let c = critic.bind(&mut tape, false);
    let reps = bind_batch(&mut tape, batch);
    let out = grouped_tc_nce_on_tape(&mut tape, &c, &reps, &batch.labels, grouping, m, rng)?;
    Ok(tape.value(out).item())
}

/// The critic's minimization target, −TC-hat, with the representations held
/// constant. Returns the loss node and the bound critic so the caller can read
/// gradients for φ.
pub fn critic_loss_for_max(
    tape: &mut Tape,
    critic: &Critic,
    batch: &EstimatorBatch,
    grouping: Grouping,
    m: usize,
    rng: &mut Rng,
) -> Result<(NodeId, BoundCritic), EstimatorError> {
    let c = critic.bind(tape, true);
    let reps = bind_batch(tape, batch);
    let est = grouped_tc_nce_on_tape(tape, &c, &reps, &batch.labels, grouping, m, rng)?;
    Ok((tape.scale(est, -1.0)?, c))
}

/// One RMSProp ascent step on TC-hat. Returns the estimate before the step.
pub fn critic_ascent_step(
    critic: &mut Critic,
    opt: &mut RmsProp,
    batch: &EstimatorBatch,
    grouping: Grouping,
    m: usize,
    rng: &mut Rng,
) -> Result<f64, EstimatorError> {
    let mut tape = Tape::new();
    let (loss, bound) = critic_loss_for_max(&mut tape, critic, batch, grouping, m, rng)?;
    let value = -tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let g = collect_grads(&tape, &mut grads, &bound.nodes());
    opt.step(critic.tensors_mut(), &g);
    Ok(value)
}

/// Trains `critic` for `steps` ascent steps on batches from `sample`.
pub fn train_critic(
    critic: &mut Critic,
    lr: f64,
    steps: usize,
    grouping: Grouping,
    m: usize,
    rng: &mut Rng,
    mut sample: impl FnMut(&mut Rng) -> EstimatorBatch,
) -> Result<(), EstimatorError> {
    let mut opt = RmsProp::new(lr, &critic.tensors());
    for _ in 0..steps {
        let batch = sample(rng);
        critic_ascent_step(critic, &mut opt, &batch, grouping, m, rng)?;
    }
    Ok(())
}

/// InfoNCE from a `K×K` score matrix with `s[i][j] = f(x_i, y_j)`:
/// `mean_i (s_ii − logsumexp_j s_ij) + ln K`.
pub fn infonce_on_tape(tape: &mut Tape, scores: NodeId) -> Result<NodeId, EstimatorError> {
    let (k, c) = tape.value(scores).dims2().unwrap_or((0, 0));
    if k < 2 || c != k {
        return Err(EstimatorError::BadSize { k, m: c });
    }
    let flat = tape.reshape(scores, vec![k * k])?;
    let diag = tape.gather_rows(flat, (0..k).map(|i| i * k + i).collect())?;
    let lse = tape.logsumexp(scores, 1)?;
    let d = tape.sub(diag, lse)?;
    let mean = tape.mean(d, 0)?;
    let log_k = tape.constant(Tensor::scalar((k as f64).ln()));
    Ok(tape.add(mean, log_k)?)
}

pub fn infonce_estimate(scores: &Tensor) -> Result<f64, EstimatorError> {
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let out = infonce_on_tape(&mut tape, s)?;
    Ok(tape.value(out).item())
}

/// `K×K` scores of every `(x_i, y_j)` pair under a scalar-output MLP over `[x, y]`.
pub fn pairwise_scores(tape: &mut Tape, f: &crate::nets::BoundMlp, x: NodeId, y: NodeId) -> Result<NodeId, EstimatorError> {
    let k = tape.value(x).shape()[0];
    let xi = tape.gather_rows(x, (0..k * k).map(|r| r / k).collect())?;
    let yj = tape.gather_rows(y, (0..k * k).map(|r| r % k).collect())?;
    let pair = tape.concat_cols(&[xi, yj])?;
    let s = f.forward(tape, pair)?;
    Ok(tape.reshape(s, vec![k, k])?)
}

/// Trains a pair scorer on InfoNCE and returns the final held-out estimate,
/// averaged over `eval_batches` fresh batches.
pub fn fit_infonce(
    f: &mut Mlp,
    lr: f64,
    steps: usize,
    eval_batches: usize,
    rng: &mut Rng,
    mut sample: impl FnMut(&mut Rng) -> (Tensor, Tensor),
) -> Result<f64, EstimatorError> {
    let mut opt = RmsProp::new(lr, &f.tensors());
    for _ in 0..steps {
        let (x, y) = sample(rng);
        let mut tape = Tape::new();
        let b = f.bind(&mut tape, true);
        let (xn, yn) = (tape.constant(x), tape.constant(y));
        let s = pairwise_scores(&mut tape, &b, xn, yn)?;
        let est = infonce_on_tape(&mut tape, s)?;
        let loss = tape.scale(est, -1.0)?;
        let mut grads = tape.backward(loss)?;
        let g = collect_grads(&tape, &mut grads, &b.nodes());
        opt.step(f.tensors_mut(), &g);
    }
    let mut total = 0.0;
    for _ in 0..eval_batches {
        let (x, y) = sample(rng);
        let mut tape = Tape::new();
        let b = f.bind(&mut tape, false);
        let (xn, yn) = (tape.constant(x), tape.constant(y));
        let s = pairwise_scores(&mut tape, &b, xn, yn)?;
        total += infonce_estimate(tape.value(s))?;
    }
    Ok(total / eval_batches.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::REPR_DIM;
    use crate::rng;

    fn rand_reps(k: usize, n: usize, seed: u64) -> Vec<Tensor> {
        let mut g = rng::stream(seed, 3);
        (0..n)
            .map(|_| {
                Tensor::matrix(k, REPR_DIM, (0..k * REPR_DIM).map(|_| g.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect()
    }

    fn constant_critic(n: usize, c: f64) -> Critic {
        let mut critic = Critic::for_collection(n, 1);
        for t in critic.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        critic.mlp.layers[2].bias.data_mut()[0] = c;
        critic
    }

    #[test]
    fn plan_indices_in_range() {
        let plan = PermutationPlan::draw(10, 3, 64, &mut rng::stream(0, 1));
        assert_eq!(plan.indices.len(), 192);
        assert!(plan.indices.iter().all(|&i| i < 10));
        assert_eq!(plan.column(2).len(), 64);
    }

    #[test]
    fn constant_critic_gives_zero() {
        let batch = EstimatorBatch {
            reps: rand_reps(20, 2, 1),
            labels: (0..20).map(|i| i % 2).collect(),
        };
        let plan = PermutationPlan::draw(20, 2, 8, &mut rng::stream(0, 1));
        assert_eq!(tc_nce_estimate(&constant_critic(2, 0.0), &batch, &plan).unwrap(), 0.0);
        for c in [0.0, 3.7, -12.5] {
            let critic = constant_critic(2, c);
            let mut r = rng::stream(0, 2);
            assert!(tc_nce_estimate(&critic, &batch, &plan).unwrap().abs() < 1e-12);
            let cond = conditional_tc_nce_estimate(&critic, &batch, 64, &mut r).unwrap();
            assert!(cond.abs() < 1e-12);
            let unc = grouped_estimate(&critic, &batch, Grouping::Unconditional, 64, &mut r).unwrap();
            assert!(unc.abs() < 1e-12);
        }
    }

    #[test]
    fn shift_invariance() {
        let batch = EstimatorBatch {
            reps: rand_reps(16, 2, 4),
            labels: vec![0; 16],
        };
        let plan = PermutationPlan::draw(16, 2, 32, &mut rng::stream(0, 1));
        let critic = Critic::for_collection(2, 9);
        let mut shifted = critic.clone();
        shifted.mlp.layers[2].bias.data_mut()[0] += 5.0;
        let a = tc_nce_estimate(&critic, &batch, &plan).unwrap();
        let b = tc_nce_estimate(&shifted, &batch, &plan).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn degenerate_groups_are_rejected() {
        let batch = EstimatorBatch {
            reps: rand_reps(2, 2, 1),
            labels: vec![0, 1],
        };
        let err = conditional_tc_nce_estimate(&Critic::for_collection(2, 0), &batch, 4, &mut rng::stream(0, 0));
        assert!(matches!(err, Err(EstimatorError::NoValidGroup)));
        assert!(err.unwrap_err().to_string().contains("no label group of size >= 2"));
    }

    #[test]
    fn groups_skip_singletons() {
        let g = label_groups(&[0, 1, 1, 2, 1, 0], Grouping::Conditional);
        assert_eq!(g, vec![vec![0, 5], vec![1, 2, 4]]);
        assert_eq!(label_groups(&[0, 1], Grouping::Unconditional), vec![vec![0, 1]]);
    }

    #[test]
    fn conditional_estimate_is_deterministic_per_seed() {
        let batch = EstimatorBatch {
            reps: rand_reps(30, 3, 2),
            labels: (0..30).map(|i| (i * 7) % 2).collect(),
        };
        let critic = Critic::for_collection(3, 2);
        let a = conditional_tc_nce_estimate(&critic, &batch, 64, &mut rng::stream(5, 0)).unwrap();
        let b = conditional_tc_nce_estimate(&critic, &batch, 64, &mut rng::stream(5, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn critic_loss_has_no_representation_gradient() {
        let batch = EstimatorBatch {
            reps: rand_reps(12, 2, 3),
            labels: (0..12).map(|i| i % 2).collect(),
        };
        let critic = Critic::for_collection(2, 3);
        let mut tape = Tape::new();
        let (loss, bound) =
            critic_loss_for_max(&mut tape, &critic, &batch, Grouping::Conditional, 8, &mut rng::stream(0, 0)).unwrap();
        let grads = tape.backward(loss).unwrap();
        let nodes = bound.nodes();
        assert_eq!(grads.len(), nodes.len());
        assert!(grads.keys().all(|k| nodes.contains(&k)));
    }

    #[test]
    fn critic_step_increases_estimate() {
        let batch = EstimatorBatch {
            reps: rand_reps(64, 2, 8),
            labels: (0..64).map(|i| i % 2).collect(),
        };
        let mut critic = Critic::for_collection(2, 4);
        let before = critic.clone();
        let mut opt = RmsProp::new(1e-7, &critic.tensors());
        let v0 = critic_ascent_step(&mut critic, &mut opt, &batch, Grouping::Conditional, 16, &mut rng::stream(1, 0)).unwrap();
        assert_ne!(before, critic);
        let v1 = conditional_tc_nce_estimate(&critic, &batch, 16, &mut rng::stream(1, 0)).unwrap();
        assert!(v1 >= v0, "{v1} < {v0}");
    }

    #[test]
    fn infonce_limits() {
        let k = 8;
        let zeros = Tensor::zeros(&[k, k]);
        assert_eq!(infonce_estimate(&zeros).unwrap(), 0.0);
        let mut peaked = vec![0.0; k * k];
        for i in 0..k {
            peaked[i * k + i] = 60.0;
        }
        let v = infonce_estimate(&Tensor::matrix(k, k, peaked).unwrap()).unwrap();
        assert!(((k as f64).ln() - v).abs() < 1e-12);
    }

    #[test]
    fn infonce_never_exceeds_log_k() {
        let mut g = rng::stream(3, 3);
        for _ in 0..50 {
            let k = g.gen_range(2..12);
            let s: Vec<f64> = (0..k * k).map(|_| g.gen_range(-20.0..20.0)).collect();
            let v = infonce_estimate(&Tensor::matrix(k, k, s).unwrap()).unwrap();
            assert!(v <= (k as f64).ln() + 1e-12);
        }
    }
}
