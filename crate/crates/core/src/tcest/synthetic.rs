//! Small systems with known information content, and the routines that train
//! a critic on them and read off its estimate.

use rand_distr::{Distribution, StandardNormal};

use super::{
    discrete_conditional_tc_oracle, discrete_tc_oracle, fit_infonce, grouped_estimate, train_critic,
    ConditionalJoint, DiscreteJoint, EstimatorBatch, EstimatorError, Grouping,
};
use crate::diffengine::Tensor;
use crate::nets::{Activation, Critic, Mlp};
use crate::rng::{self, Rng};

/// Settings for fitting a critic to a discrete system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSettings {
    pub steps: usize,
    pub batch: usize,
    pub m: usize,
    pub lr: f64,
    pub hidden: usize,
    /// Fresh batches averaged for the reported estimate.
    pub eval_batches: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 256,
            m: 64,
            lr: 1e-3,
            hidden: 64,
            eval_batches: 50,
        }
    }
}

/// A labelled discrete system: label marginal plus per-label joints.
#[derive(Debug, Clone)]
pub struct BinarySystem {
    pub name: &'static str,
    pub joint: ConditionalJoint,
}

impl BinarySystem {
    pub fn tc(&self) -> f64 {
        discrete_tc_oracle(&self.joint.marginalize_label())
    }

    pub fn conditional_tc(&self) -> f64 {
        discrete_conditional_tc_oracle(&self.joint)
    }

    pub fn oracle(&self, grouping: Grouping) -> f64 {
        match grouping {
            Grouping::Conditional => self.conditional_tc(),
            Grouping::Unconditional => self.tc(),
        }
    }

    pub fn n(&self) -> usize {
        self.joint.given(0).n()
    }

    fn card(&self) -> usize {
        *self.joint.given(0).cards().iter().max().expect("nonempty")
    }

    /// `K` draws, each variable one-hot encoded into its own block.
    pub fn sample_batch(&self, k: usize, rng: &mut Rng) -> EstimatorBatch {
        let (n, c) = (self.n(), self.card());
        let mut blocks = vec![vec![0.0; k * c]; n];
        let mut labels = Vec::with_capacity(k);
        for row in 0..k {
            let (y, xs) = self.joint.sample(rng);
            labels.push(y);
            for (v, &x) in xs.iter().enumerate() {
                blocks[v][row * c + x] = 1.0;
            }
        }
        EstimatorBatch {
            reps: blocks
                .into_iter()
                .map(|b| Tensor::matrix(k, c, b).expect("positive dims"))
                .collect(),
            labels,
        }
    }
}

fn flip(p: f64) -> Vec<f64> {
    vec![1.0 - p, p]
}

fn noisy_copy(y: usize, p: f64) -> Vec<f64> {
    if y == 0 {
        flip(p)
    } else {
        flip(1.0 - p)
    }
}

fn pair_table(same: f64) -> DiscreteJoint {
    let off = (1.0 - 2.0 * same) / 2.0;
    DiscreteJoint::new(vec![2, 2], vec![same, off, off, same]).expect("valid table")
}

/// The 2- and 3-variable binary systems used to check the estimators.
pub fn binary_systems() -> Vec<BinarySystem> {
    let half = vec![0.5, 0.5];
    let cj = |given: Vec<DiscreteJoint>| ConditionalJoint::new(half.clone(), given).expect("valid system");
    vec![
        BinarySystem {
            name: "single variable",
            joint: cj(vec![
                DiscreteJoint::product(&[flip(0.3)]).unwrap(),
                DiscreteJoint::product(&[flip(0.6)]).unwrap(),
            ]),
        },
        BinarySystem {
            name: "label-independent 0.4/0.1 pair",
            joint: cj(vec![pair_table(0.4), pair_table(0.4)]),
        },
        BinarySystem {
            name: "perfect copies of the label",
            joint: cj(vec![
                DiscreteJoint::product(&[noisy_copy(0, 0.0), noisy_copy(0, 0.0)]).unwrap(),
                DiscreteJoint::product(&[noisy_copy(1, 0.0), noisy_copy(1, 0.0)]).unwrap(),
            ]),
        },
        BinarySystem {
            name: "two label copies flipped w.p. 0.1",
            joint: cj((0..2)
                .map(|y| DiscreteJoint::product(&[noisy_copy(y, 0.1), noisy_copy(y, 0.1)]).unwrap())
                .collect()),
        },
        BinarySystem {
            name: "three label copies flipped w.p. 0.2",
            joint: cj((0..2)
                .map(|y| {
                    DiscreteJoint::product(&[noisy_copy(y, 0.2), noisy_copy(y, 0.2), noisy_copy(y, 0.2)]).unwrap()
                })
                .collect()),
        },
        BinarySystem {
            name: "dependent pair plus a label copy",
            joint: cj((0..2).map(|y| pair_with_label_copy(y, 0.4)).collect()),
        },
    ]
}

fn pair_with_label_copy(y: usize, same: f64) -> DiscreteJoint {
    let third = noisy_copy(y, 0.2);
    let probs = pair_table(same).probs().iter().flat_map(|p| third.iter().map(move |q| p * q)).collect();
    DiscreteJoint::new(vec![2, 2, 2], probs).expect("valid table")
}

/// A system the label-blind critic cannot fully resolve: the pair is
/// positively dependent when `Y = 0` and negatively when `Y = 1`, and the label
/// is only partly recoverable from the third variable. A critic scoring the
/// variables alone falls well short of the conditional oracle here.
pub fn label_flipping_pair() -> BinarySystem {
    BinarySystem {
        name: "pair whose dependence flips with the label",
        joint: ConditionalJoint::new(
            vec![0.5, 0.5],
            vec![pair_with_label_copy(0, 0.4), pair_with_label_copy(1, 0.1)],
        )
        .expect("valid system"),
    }
}

/// Trains a fresh critic on `system` and returns its averaged TC-hat.
pub fn trained_estimate(
    system: &BinarySystem,
    grouping: Grouping,
    seed: u64,
    s: &ProbeSettings,
) -> Result<f64, EstimatorError> {
    let mut critic = Critic::new(
        system.n(),
        system.card(),
        &[s.hidden, s.hidden],
        false,
        &mut rng::stream(seed, rng::CRITIC_INIT),
    );
    let mut r = rng::stream(seed, rng::CRITIC_LOADER);
    train_critic(&mut critic, s.lr, s.steps, grouping, s.m, &mut r, |g| system.sample_batch(s.batch, g))?;
    let mut total = 0.0;
    for _ in 0..s.eval_batches {
        let batch = system.sample_batch(s.batch, &mut r);
        total += grouped_estimate(&critic, &batch, grouping, s.m, &mut r)?;
    }
    Ok(total / s.eval_batches as f64)
}

/// Median of [`trained_estimate`] over `seeds`.
pub fn median_trained_estimate(
    system: &BinarySystem,
    grouping: Grouping,
    seeds: &[u64],
    s: &ProbeSettings,
) -> Result<f64, EstimatorError> {
    let mut v = seeds
        .iter()
        .map(|&seed| trained_estimate(system, grouping, seed, s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(median(&mut v))
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// `K` draws of a standard bivariate Gaussian with correlation `rho`.
pub fn gaussian_pairs(rho: f64, k: usize, rng: &mut Rng) -> (Tensor, Tensor) {
    let mut x = Vec::with_capacity(k);
    let mut y = Vec::with_capacity(k);
    let s = (1.0 - rho * rho).sqrt();
    for _ in 0..k {
        let a: f64 = StandardNormal.sample(rng);
        let b: f64 = StandardNormal.sample(rng);
        x.push(a);
        y.push(rho * a + s * b);
    }
    (
        Tensor::matrix(k, 1, x).expect("k > 0"),
        Tensor::matrix(k, 1, y).expect("k > 0"),
    )
}

/// InfoNCE of a trained pair scorer on correlated Gaussians.
pub fn gaussian_infonce(rho: f64, seed: u64, steps: usize, k: usize) -> Result<f64, EstimatorError> {
    let mut f = Mlp::he(&[2, 32, 32, 1], Activation::LeakyRelu(0.2), &mut rng::stream(seed, rng::CRITIC_INIT));
    let mut r = rng::stream(seed, rng::CRITIC_LOADER);
    fit_infonce(&mut f, 1e-3, steps, 40, &mut r, |g| gaussian_pairs(rho, k, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_values_of_the_systems() {
        let s = binary_systems();
        assert!(s[0].tc().abs() < 1e-12);
        assert!((s[1].tc() - 0.192_745).abs() < 1e-5);
        assert!((s[1].conditional_tc() - 0.192_745).abs() < 1e-5);
        assert!((s[2].tc() - 2f64.ln()).abs() < 1e-12);
        assert!(s[2].conditional_tc().abs() < 1e-12);
        assert!(s[3].conditional_tc().abs() < 1e-12);
        assert!(s[4].conditional_tc().abs() < 1e-12);
        assert!((s[5].conditional_tc() - 0.192_745).abs() < 1e-5);
        assert!((label_flipping_pair().conditional_tc() - 0.192_745).abs() < 1e-5);
        for sys in &s {
            assert!(sys.tc() <= 0.7 && sys.conditional_tc() <= 0.7, "{}", sys.name);
        }
    }

    #[test]
    fn one_hot_batches() {
        let s = &label_flipping_pair();
        let b = s.sample_batch(10, &mut rng::stream(0, 0));
        assert_eq!(b.reps.len(), 3);
        assert_eq!(b.reps[0].shape(), &[10, 2]);
        for r in &b.reps {
            for row in 0..10 {
                assert_eq!(r.row(row).iter().sum::<f64>(), 1.0);
            }
        }
    }
}
