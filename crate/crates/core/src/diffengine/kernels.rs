//! Tensor-level kernels shared by the tape's forward and backward rules.

use super::{EngineError, Tensor};

fn mismatch(op: &'static str, shapes: &[&Tensor]) -> EngineError {
    EngineError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

/// `op(a) · op(b)` where `op` optionally transposes a rank-2 operand.
pub fn matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor, EngineError> {
    let (ar, ac) = a.dims2().ok_or_else(|| mismatch("matmul", &[a, b]))?;
    let (br, bc) = b.dims2().ok_or_else(|| mismatch("matmul", &[a, b]))?;
    let (m, k, rsa, csa) = if trans_a {
        (ac, ar, 1isize, ac as isize)
    } else {
        (ar, ac, ac as isize, 1isize)
    };
    let (k2, n, rsb, csb) = if trans_b {
        (bc, br, 1isize, bc as isize)
    } else {
        (br, bc, bc as isize, 1isize)
    };
    if k != k2 {
        return Err(mismatch("matmul", &[a, b]));
    }
    let mut out = vec![0.0; m * n];
    // SAFETY: strides describe in-bounds row-major views of `a`, `b` and `out`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::matrix(m, n, out)
}

pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor, EngineError> {
    let (r, c) = x.dims2().ok_or_else(|| mismatch("add_bias", &[x, bias]))?;
    if bias.shape() != [c] {
        return Err(mismatch("add_bias", &[x, bias]));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Tensor::matrix(r, c, out)
}

/// Column sums of a rank-2 tensor.
pub fn sum_rows(x: &Tensor) -> Tensor {
    let (_, c) = x.dims2().expect("sum_rows needs rank 2");
    let mut out = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

pub fn zip_with(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, EngineError> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, &[a, b]));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Row-wise L2 normalization; returns the normalized rows and the guarded norms.
pub fn l2_normalize_rows(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>), EngineError> {
    let (r, c) = x.dims2().ok_or_else(|| mismatch("l2_normalize_rows", &[x]))?;
    let mut out = x.data().to_vec();
    let mut norms = Vec::with_capacity(r);
    for row in out.chunks_exact_mut(c) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        for v in row.iter_mut() {
            *v /= norm;
        }
        norms.push(norm);
    }
    Ok((Tensor::matrix(r, c, out)?, norms))
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor, EngineError> {
    let first = parts.first().ok_or(EngineError::EmptyInputs("concat_cols"))?;
    let (rows, _) = first.dims2().ok_or_else(|| mismatch("concat_cols", parts))?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        match p.dims2() {
            Some((r, c)) if r == rows => widths.push(c),
            _ => return Err(mismatch("concat_cols", parts)),
        }
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    Tensor::matrix(rows, total, out)
}

pub fn gather_rows(x: &Tensor, indices: &[usize]) -> Result<Tensor, EngineError> {
    let (rows, width) = x.row_layout().ok_or_else(|| mismatch("gather_rows", &[x]))?;
    if indices.is_empty() {
        return Err(EngineError::EmptyInputs("gather_rows"));
    }
    let mut out = Vec::with_capacity(indices.len() * width);
    for &i in indices {
        if i >= rows {
            return Err(EngineError::IndexOutOfRange { index: i, rows });
        }
        out.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, out)
}

/// Adds each row of `grad` into row `indices[k]` of a zero tensor shaped like `target_shape`.
pub fn scatter_add_rows(grad: &Tensor, indices: &[usize], target_shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(target_shape);
    let width = grad.len() / indices.len();
    let dst = out.data_mut();
    for (k, &i) in indices.iter().enumerate() {
        let src = &grad.data()[k * width..(k + 1) * width];
        for (d, s) in dst[i * width..(i + 1) * width].iter_mut().zip(src) {
            *d += s;
        }
    }
    out
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub fn axis_layout(shape: &[usize], axis: usize) -> Option<(usize, usize, usize)> {
    if axis >= shape.len() {
        return None;
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Some((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor, EngineError> {
    let (outer, len, inner) = axis_layout(x.shape(), axis).ok_or_else(|| mismatch("mean", &[x]))?;
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            for i in 0..inner {
                out[o * inner + i] += x.data()[base + i];
            }
        }
    }
    let scale = 1.0 / len as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    Tensor::new(reduced_shape(x.shape(), axis), out)
}

/// Max-shifted log-sum-exp along `axis`.
pub fn logsumexp_axis(x: &Tensor, axis: usize) -> Result<Tensor, EngineError> {
    let (outer, len, inner) =
        axis_layout(x.shape(), axis).ok_or_else(|| mismatch("logsumexp", &[x]))?;
    let d = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| d[(o * len + l) * inner + i];
            let max = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..len).map(|l| (at(l) - max).exp()).sum();
            out[o * inner + i] = max + sum.ln();
        }
    }
    Tensor::new(reduced_shape(x.shape(), axis), out)
}

/// Mean softmax cross-entropy over rows; returns the loss and the row softmax.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor), EngineError> {
    let (r, c) = logits
        .dims2()
        .ok_or_else(|| mismatch("softmax_cross_entropy", &[logits]))?;
    if targets.len() != r {
        return Err(EngineError::ShapeMismatch {
            op: "softmax_cross_entropy",
            shapes: vec![logits.shape().to_vec(), vec![targets.len()]],
        });
    }
    let mut probs = logits.data().to_vec();
    let mut loss = 0.0;
    for (row, &t) in probs.chunks_exact_mut(c).zip(targets) {
        if t >= c {
            return Err(EngineError::IndexOutOfRange { index: t, rows: c });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[t];
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    Ok((loss / r as f64, Tensor::matrix(r, c, probs)?))
}
