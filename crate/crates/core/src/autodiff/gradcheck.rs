//! Central finite-difference verification of analytic gradients.

use alloc::vec::Vec;

use super::tape::{Tape, TensorId};
use super::tensor::{Tensor, TensorError};

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences, coordinate by coordinate.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// Meant to run in 64-bit mode with `step` around `1e-5`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, TensorId) -> Result<TensorId, TensorError>,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone().with_grad());
    let y = f(&mut tape, xid)?;
    if !tape.value(y).is_scalar() {
        return Err(TensorError::NotScalar);
    }
    let grads = tape.backward(y)?;
    let analytic = grads.wrt(&tape, xid);

    let eval = |data: Vec<f64>| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let id = t.leaf(Tensor::new(x.shape().to_vec(), data)?);
        // an op that traps NaN/Inf during a perturbed evaluation counts as a
        // non-finite probe, not an implementation failure
        let out = f(&mut t, id).map_err(|e| match e {
            TensorError::NonFinite { .. } => TensorError::NonFiniteProbe,
            other => other,
        })?;
        let v = t.value(out).item();
        if !v.is_finite() {
            return Err(TensorError::NonFiniteProbe);
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += step;
        let mut minus = x.data().to_vec();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
