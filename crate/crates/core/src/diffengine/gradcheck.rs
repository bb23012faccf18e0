use super::{EngineError, NodeId, Tape, Tensor};

/// Largest relative disagreement between the tape gradient of `f` at `point`
/// and central differences with step `eps`, over every coordinate.
///
/// `f` receives a fresh tape and the trainable leaf holding the point, and
/// returns the node of a scalar output. The relative error of a coordinate is
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64, EngineError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, EngineError>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, eps, &coords)
}

/// As [`grad_check`], restricted to the listed coordinates of `point`.
pub fn grad_check_coords<F>(
    f: F,
    point: &Tensor,
    eps: f64,
    coords: &[usize],
) -> Result<f64, EngineError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, EngineError>,
{
    if !(eps > 0.0) {
        return Err(EngineError::BadStep(eps));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let out = f(&mut tape, x)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor, coord: usize| -> Result<f64, EngineError> {
        let mut t = Tape::new();
        let leaf = t.param(p);
        let node = f(&mut t, leaf)?;
        let v = t.value(node).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EngineError::NonFinite { coord })
        }
    };

    let mut worst: f64 = 0.0;
    for &c in coords {
        if c >= point.len() {
            return Err(EngineError::IndexOutOfRange {
                index: c,
                rows: point.len(),
            });
        }
        let mut plus = point.clone();
        plus.data_mut()[c] += eps;
        let mut minus = point.clone();
        minus.data_mut()[c] -= eps;
        let numeric = (eval(plus, c)? - eval(minus, c)?) / (2.0 * eps);
        let a = analytic.data()[c];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
