//! Binary logistic regression with an L2 penalty on the weights.
//!
//! Objective: mean cross-entropy + `l2·‖w‖²`, bias unpenalized. Fitted with
//! damped Newton steps and a backtracking line search until the gradient norm
//! drops below [`GRAD_TOL`] or [`MAX_ITERS`] steps have run.

use nalgebra::{DMatrix, DVector};

use super::EvalError;
use crate::diffengine::Tensor;

pub const GRAD_TOL: f64 = 1e-6;
pub const MAX_ITERS: usize = 200;
/// Candidate penalties, tried in this order; ties keep the earlier one.
pub const L2_GRID: [f64; 6] = [0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct LogRegModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

struct Problem<'a> {
    x: &'a [f64],
    y: Vec<f64>,
    n: usize,
    d: usize,
    l2: f64,
}

impl Problem<'_> {
    fn margins(&self, theta: &DVector<f64>) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let row = &self.x[i * self.d..(i + 1) * self.d];
                row.iter().zip(theta.iter()).map(|(a, b)| a * b).sum::<f64>() + theta[self.d]
            })
            .collect()
    }

    fn loss(&self, theta: &DVector<f64>) -> f64 {
        let z = self.margins(theta);
        let ce: f64 = z.iter().zip(&self.y).map(|(&z, &y)| softplus(z) - y * z).sum::<f64>() / self.n as f64;
        let pen: f64 = theta.iter().take(self.d).map(|w| w * w).sum::<f64>();
        ce + self.l2 * pen
    }

    /// Gradient and Hessian over `[w; b]`.
    fn derivatives(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = (self.n, self.d);
        let z = self.margins(theta);
        let mut g = DVector::zeros(d + 1);
        let mut h = DMatrix::zeros(d + 1, d + 1);
        let mut xi = vec![0.0; d + 1];
        for i in 0..n {
            xi[..d].copy_from_slice(&self.x[i * d..(i + 1) * d]);
            xi[d] = 1.0;
            let p = sigmoid(z[i]);
            let r = p - self.y[i];
            let s = p * (1.0 - p);
            for a in 0..=d {
                g[a] += r * xi[a];
                let sa = s * xi[a];
                if sa != 0.0 {
                    for b in a..=d {
                        h[(a, b)] += sa * xi[b];
                    }
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        g *= inv_n;
        h *= inv_n;
        for a in 0..=d {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }
        for a in 0..d {
            g[a] += 2.0 * self.l2 * theta[a];
            h[(a, a)] += 2.0 * self.l2;
        }
        (g, h)
    }
}

fn check_inputs(x: &Tensor, labels: &[usize]) -> Result<(usize, usize), EvalError> {
    let (n, d) = x.dims2().ok_or_else(|| EvalError::Shape(format!("features must be a matrix, got {:?}", x.shape())))?;
    if n != labels.len() {
        return Err(EvalError::Shape(format!("{n} feature rows for {} labels", labels.len())));
    }
    if n < 2 {
        return Err(EvalError::Shape(format!("need at least 2 rows, got {n}")));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(EvalError::Shape("labels must be 0 or 1".into()));
    }
    let ones = labels.iter().filter(|&&l| l == 1).count();
    if ones == 0 || ones == n {
        return Err(EvalError::SingleClass);
    }
    Ok((n, d))
}

pub fn fit_logreg(x: &Tensor, labels: &[usize], l2: f64) -> Result<LogRegModel, EvalError> {
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(EvalError::Shape(format!("l2 strength must be finite and >= 0, got {l2}")));
    }
    let (n, d) = check_inputs(x, labels)?;
    let prob = Problem {
        x: x.data(),
        y: labels.iter().map(|&l| l as f64).collect(),
        n,
        d,
        l2,
    };
    let mut theta = DVector::zeros(d + 1);
    let mut loss = prob.loss(&theta);
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    while iterations < MAX_ITERS {
        let (g, mut h) = prob.derivatives(&theta);
        grad_norm = g.norm();
        if grad_norm < GRAD_TOL {
            break;
        }
        // Small ridge keeps the system solvable on separable or collinear data.
        let jitter = 1e-10 * (1.0 + h.diagonal().amax());
        for a in 0..=d {
            h[(a, a)] += jitter;
        }
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => g.clone(),
        };
        let slope = g.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &theta - t * &step;
            let l = prob.loss(&cand);
            if l.is_finite() && l <= loss - 1e-4 * t * slope {
                theta = cand;
                loss = l;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite("logistic regression diverged".into()));
    }
    Ok(LogRegModel {
        weights: theta.iter().take(d).copied().collect(),
        bias: theta[d],
        l2,
        iterations,
        grad_norm,
    })
}

impl LogRegModel {
    pub fn predict_proba(&self, x: &Tensor) -> Vec<f64> {
        let d = self.weights.len();
        x.data()
            .chunks_exact(d)
            .map(|row| sigmoid(row.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias))
            .collect()
    }

    /// Class 1 when the probability exceeds one half.
    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        self.predict_proba(x).into_iter().map(|p| usize::from(p > 0.5)).collect()
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> f64 {
        accuracy(&self.predict(x), labels)
    }
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Fits one model per penalty in `grid` and keeps the one with the best
/// validation accuracy. Returns it with that accuracy.
pub fn fit_logreg_grid(
    train_x: &Tensor,
    train_y: &[usize],
    val_x: &Tensor,
    val_y: &[usize],
    grid: &[f64],
) -> Result<(LogRegModel, f64), EvalError> {
    let mut best: Option<(LogRegModel, f64)> = None;
    for &l2 in grid {
        let m = fit_logreg(train_x, train_y, l2)?;
        let acc = m.accuracy(val_x, val_y);
        if best.as_ref().is_none_or(|(_, b)| acc > *b) {
            best = Some((m, acc));
        }
    }
    best.ok_or_else(|| EvalError::Shape("empty l2 grid".into()))
}
