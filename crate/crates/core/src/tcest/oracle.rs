//! Exact information quantities for small discrete systems and for the
//! bivariate Gaussian.

use rand::Rng as _;
use thiserror::Error;

use crate::rng::Rng;

const NORM_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("probability table sums to {0}, not 1")]
    Unnormalized(f64),
    #[error("negative or non-finite probability {0}")]
    BadEntry(f64),
    #[error("table has {actual} cells, cardinalities imply {expected}")]
    Size { expected: usize, actual: usize },
    #[error("correlation {0} must satisfy |rho| < 1")]
    BadRho(f64),
    #[error("{joints} conditional tables for {labels} label values")]
    LabelMismatch { joints: usize, labels: usize },
    #[error("conditional tables disagree on cardinalities")]
    CardMismatch,
}

/// Probability table over `n` finite variables, row-major with the last
/// variable varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    cards: Vec<usize>,
    probs: Vec<f64>,
}

fn check_distribution(p: &[f64]) -> Result<(), OracleError> {
    if let Some(&bad) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(OracleError::BadEntry(bad));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > NORM_TOL {
        return Err(OracleError::Unnormalized(total));
    }
    Ok(())
}

impl DiscreteJoint {
    pub fn new(cards: Vec<usize>, probs: Vec<f64>) -> Result<Self, OracleError> {
        let expected = cards.iter().product();
        if probs.len() != expected {
            return Err(OracleError::Size {
                expected,
                actual: probs.len(),
            });
        }
        check_distribution(&probs)?;
        Ok(Self { cards, probs })
    }

    /// Product of independent marginals.
    pub fn product(marginals: &[Vec<f64>]) -> Result<Self, OracleError> {
        let cards: Vec<usize> = marginals.iter().map(Vec::len).collect();
        let mut probs = vec![1.0];
        for m in marginals {
            probs = probs.iter().flat_map(|p| m.iter().map(move |q| p * q)).collect();
        }
        Self::new(cards, probs)
    }

    /// Empirical table from observed tuples.
    pub fn from_counts(cards: Vec<usize>, tuples: &[Vec<usize>]) -> Result<Self, OracleError> {
        let size: usize = cards.iter().product();
        let mut probs = vec![0.0; size];
        let mut j = Self {
            cards,
            probs: Vec::new(),
        };
        for t in tuples {
            probs[j.flat(t)] += 1.0;
        }
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        j.probs = probs;
        check_distribution(&j.probs)?;
        Ok(j)
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n(&self) -> usize {
        self.cards.len()
    }

    fn flat(&self, tuple: &[usize]) -> usize {
        tuple.iter().zip(&self.cards).fold(0, |acc, (&v, &c)| acc * c + v)
    }

    pub fn tuple(&self, mut cell: usize) -> Vec<usize> {
        let mut out = vec![0; self.cards.len()];
        for (slot, &c) in out.iter_mut().zip(&self.cards).rev() {
            *slot = cell % c;
            cell /= c;
        }
        out
    }

    pub fn marginal(&self, var: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.cards[var]];
        for (cell, &p) in self.probs.iter().enumerate() {
            m[self.tuple(cell)[var]] += p;
        }
        m
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<usize> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (cell, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return self.tuple(cell);
            }
        }
        let last = self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        self.tuple(last)
    }
}

/// `KL[p(x₁..xₙ) ‖ Π p(x_i)]` by enumeration.
pub fn discrete_tc_oracle(joint: &DiscreteJoint) -> f64 {
    let marginals: Vec<Vec<f64>> = (0..joint.n()).map(|v| joint.marginal(v)).collect();
    joint
        .probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(cell, &p)| {
            let prod: f64 = joint.tuple(cell).iter().enumerate().map(|(v, &x)| marginals[v][x]).product();
            p * (p / prod).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Label marginal plus one joint table per label value.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalJoint {
    label_marginal: Vec<f64>,
    given: Vec<DiscreteJoint>,
}

impl ConditionalJoint {
    pub fn new(label_marginal: Vec<f64>, given: Vec<DiscreteJoint>) -> Result<Self, OracleError> {
        check_distribution(&label_marginal)?;
        if given.len() != label_marginal.len() {
            return Err(OracleError::LabelMismatch {
                joints: given.len(),
                labels: label_marginal.len(),
            });
        }
        if given.iter().any(|g| g.cards != given[0].cards) {
            return Err(OracleError::CardMismatch);
        }
        Ok(Self { label_marginal, given })
    }

    /// Empirical conditional tables from `(label, tuple)` observations.
    pub fn from_counts(label_card: usize, cards: Vec<usize>, obs: &[(usize, Vec<usize>)]) -> Result<Self, OracleError> {
        let mut label_marginal = vec![0.0; label_card];
        let mut per: Vec<Vec<Vec<usize>>> = vec![Vec::new(); label_card];
        for (y, t) in obs {
            label_marginal[*y] += 1.0;
            per[*y].push(t.clone());
        }
        let total = obs.len() as f64;
        label_marginal.iter_mut().for_each(|p| *p /= total);
        let given = per
            .iter()
            .map(|ts| DiscreteJoint::from_counts(cards.clone(), ts))
            .collect::<Result<_, _>>()?;
        Self::new(label_marginal, given)
    }

    pub fn label_marginal(&self) -> &[f64] {
        &self.label_marginal
    }

    pub fn given(&self, y: usize) -> &DiscreteJoint {
        &self.given[y]
    }

    /// The joint of the variables with the label marginalized out.
    pub fn marginalize_label(&self) -> DiscreteJoint {
        let mut probs = vec![0.0; self.given[0].probs.len()];
        for (w, g) in self.label_marginal.iter().zip(&self.given) {
            for (p, q) in probs.iter_mut().zip(&g.probs) {
                *p += w * q;
            }
        }
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        DiscreteJoint {
            cards: self.given[0].cards.clone(),
            probs,
        }
    }

    /// Draws `(label, tuple)`.
    pub fn sample(&self, rng: &mut Rng) -> (usize, Vec<usize>) {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut y = self.label_marginal.len() - 1;
        for (i, &p) in self.label_marginal.iter().enumerate() {
            acc += p;
            if u < acc {
                y = i;
                break;
            }
        }
        (y, self.given[y].sample(rng))
    }
}

/// `E_Y KL[p(x₁..xₙ|Y) ‖ Π p(x_i|Y)]` by enumeration.
pub fn discrete_conditional_tc_oracle(cj: &ConditionalJoint) -> f64 {
    cj.label_marginal
        .iter()
        .zip(&cj.given)
        .filter(|(&w, _)| w > 0.0)
        .map(|(w, g)| w * discrete_tc_oracle(g))
        .sum()
}

/// Mutual information of a standard bivariate Gaussian, `−½ ln(1−ρ²)`.
pub fn gaussian_mi_oracle(rho: f64) -> Result<f64, OracleError> {
    if !(rho.abs() < 1.0) {
        return Err(OracleError::BadRho(rho));
    }
    Ok(-0.5 * (1.0 - rho * rho).ln())
}
