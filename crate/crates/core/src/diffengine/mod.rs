//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every forward op together with the state its backward
//! rule needs. [`Tape::backward`] walks the tape once in reverse and returns
//! gradients for the trainable leaves that the seed depends on. Parameter
//! updates are left to the optimizer; the engine never mutates leaves.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords};
pub use tape::{GradientMap, NodeId, OpKind, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("{op}: shape mismatch {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("{op}: expected {expected} inputs, got {actual}")]
    Arity {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{0}: no inputs")]
    EmptyInputs(&'static str),
    #[error("shape {shape:?} does not hold {actual} elements")]
    BadLength { shape: Vec<usize>, actual: usize },
    #[error("backward seed must be scalar, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("non-finite function value at coordinate {coord}")]
    NonFinite { coord: usize },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn relu_and_leaky_relu() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let z = t.constant(Tensor::vector(vec![-1.0, 2.0]));
        let lz = t.leaky_relu(z, 0.2).unwrap();
        assert!(close(t.value(lz).data(), &[-0.2, 2.0], 1e-15));
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let y = t.l2_normalize_rows(x, 1e-12).unwrap();
        assert!(close(t.value(y).data(), &[0.6, 0.8], 1e-15));
    }

    #[test]
    fn logsumexp_does_not_overflow() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let y = t.logsumexp(x, 0).unwrap();
        let v = t.value(y).item();
        assert!(v.is_finite());
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn mean_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = t.mul(x, x).unwrap();
        let m = t.mean(sq, 0).unwrap();
        let g = t.backward(m).unwrap();
        assert!(close(g.get(x).unwrap().data(), &[2.0 / 3.0, 4.0 / 3.0, 2.0], 1e-12));
    }

    #[test]
    fn logsumexp_gradient_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.0, 0.0]));
        let y = t.logsumexp(x, 0).unwrap();
        let g = t.backward(y).unwrap();
        assert!(close(g.get(x).unwrap().data(), &[0.5, 0.5], 1e-15));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut t = Tape::new();
        let logits = t.param(Tensor::matrix(2, 2, vec![0.3, -1.2, 2.0, 0.5]).unwrap());
        let loss = t.softmax_cross_entropy(logits, vec![1, 0]).unwrap();
        let g = t.backward(loss).unwrap();
        let mut expected = Vec::new();
        for (row, target) in [([0.3f64, -1.2f64], 1usize), ([2.0, 0.5], 0)] {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for (k, v) in row.iter().enumerate() {
                let onehot = if k == target { 1.0 } else { 0.0 };
                expected.push((v.exp() / z - onehot) / 2.0);
            }
        }
        assert!(close(g.get(logits).unwrap().data(), &expected, 1e-12));
    }

    #[test]
    fn uniform_logits_cost_ln2() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(&[4, 2]));
        let loss = t.softmax_cross_entropy(logits, vec![0, 1, 1, 0]).unwrap();
        assert!((t.value(loss).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            EngineError::ShapeMismatch {
                op: "matmul",
                shapes: vec![vec![2, 3], vec![2, 3]]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn gather_out_of_range_fails() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        assert_eq!(
            t.gather_rows(a, vec![0, 2]).unwrap_err(),
            EngineError::IndexOutOfRange { index: 2, rows: 2 }
        );
    }

    #[test]
    fn non_scalar_seed_fails() {
        let mut t = Tape::new();
        let a = t.param(Tensor::zeros(&[2, 3]));
        let b = t.relu(a).unwrap();
        assert_eq!(t.backward(b).unwrap_err(), EngineError::NonScalarSeed(vec![2, 3]));
    }

    #[test]
    fn gradient_keys_are_reachable_trainable_leaves() {
        let mut t = Tape::new();
        let a = t.param(Tensor::vector(vec![1.0, 2.0]));
        let b = t.param(Tensor::vector(vec![3.0, 4.0]));
        let c = t.constant(Tensor::vector(vec![5.0, 6.0]));
        let unused = t.param(Tensor::vector(vec![0.0, 0.0]));
        let ac = t.mul(a, c).unwrap();
        let s = t.mean(ac, 0).unwrap();
        let _ = t.add(b, b).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.contains(a));
        assert!(!g.contains(b));
        assert!(!g.contains(c));
        assert!(!g.contains(unused));
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn ungathered_rows_get_exact_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::matrix(4, 2, vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        let g = t.gather_rows(x, vec![1, 1, 3]).unwrap();
        let m = t.mean_all(g).unwrap();
        let grads = t.backward(m).unwrap();
        let gx = grads.get(x).unwrap().data();
        assert_eq!(&gx[0..2], &[0.0, 0.0]);
        assert_eq!(&gx[4..6], &[0.0, 0.0]);
        assert!(close(&gx[2..4], &[2.0 / 6.0, 2.0 / 6.0], 1e-15));
    }

    #[test]
    fn linear_function_grad_check_is_exact() {
        let w = Tensor::matrix(3, 1, vec![0.5, -2.0, 1.25]).unwrap();
        let err = grad_check(
            |t, x| {
                let wn = t.constant(w.clone());
                let y = t.matmul(x, wn)?;
                t.mean_all(y)
            },
            &Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn grad_check_rejects_bad_step_and_non_finite() {
        let p = Tensor::vector(vec![1.0]);
        assert!(matches!(
            grad_check(|t, x| t.mean(x, 0), &p, 0.0),
            Err(EngineError::BadStep(_))
        ));
        let p = Tensor::vector(vec![f64::INFINITY]);
        assert!(matches!(
            grad_check(|t, x| t.mean(x, 0), &p, 1e-5),
            Err(EngineError::NonFinite { .. })
        ));
    }
}
