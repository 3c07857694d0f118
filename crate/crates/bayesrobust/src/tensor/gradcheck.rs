//! Central finite-difference gradient verification.

use super::{Tape, Tensor, Value};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar-valued function against
/// central finite differences at `x0`.
///
/// Returns the maximum over coordinates of
/// `|analytic - central| / (|central| + 1e-12)`.
/// A coordinate the loss never touches contributes an analytic 0.
/// `f` must be a deterministic function of its input (sample any noise
/// outside and capture it).
pub fn finite_difference_check<F>(f: F, x0: &Value, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if h <= 0.0 {
        return Err(Error::InvalidParam(format!("finite difference step must be > 0, got {h}")));
    }

    let tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let y = f(&x)?;
    if y.len() != 1 {
        return Err(Error::NonScalarLoss(y.shape().to_vec()));
    }
    let analytic = if y.requires_grad() {
        y.backward()?.get(&x)?.unwrap_or_else(|| Value::zeros(x0.raw_dim()))
    } else {
        Value::zeros(x0.raw_dim())
    };

    let eval = |point: Value| -> Result<f64> {
        let out = f(&Tensor::constant(point))?;
        out.scalar()
    };

    let mut worst: f64 = 0.0;
    let flat_analytic = analytic.iter().copied().collect::<Vec<_>>();
    let base = x0.iter().copied().collect::<Vec<_>>();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = eval(Value::from_shape_vec(x0.raw_dim(), plus).expect("same shape"))?;
        let fm = eval(Value::from_shape_vec(x0.raw_dim(), minus).expect("same shape"))?;
        let central = (fp - fm) / (2.0 * h);
        let rel = (flat_analytic[i] - central).abs() / (central.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
