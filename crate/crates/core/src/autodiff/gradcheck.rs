//! Central-difference verification of tape gradients.

use crate::autodiff::tape::Tape;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Relative error with a unit floor, so near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at `point`, coordinate by coordinate.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    assert!(step > 0.0, "step must be positive");

    let tape = Tape::new();
    let x = tape.watch(point);
    let y = f(&tape, &x)?;
    if !y.is_scalar() {
        return Err(Error::NonScalarRoot {
            shape: y.shape().to_vec(),
        });
    }
    if !y.item().is_finite() {
        return Err(Error::NonFiniteForward { value: y.item() });
    }
    let analytic = tape.backward(&y)?.wrt(&x)?;

    let eval = |p: &Tensor| -> Result<f64> {
        let t = Tape::new();
        let v = f(&t, &t.watch(p))?;
        if !v.item().is_finite() {
            return Err(Error::NonFiniteForward { value: v.item() });
        }
        Ok(v.item())
    };

    let mut max_rel_err: f64 = 0.0;
    for i in 0..point.len() {
        let mut hi = point.detached();
        let mut lo = point.detached();
        hi.data_mut()[i] += step;
        lo.data_mut()[i] -= step;
        let numeric = (eval(&hi)? - eval(&lo)?) / (2.0 * step);
        max_rel_err = max_rel_err.max(rel_err(analytic.data()[i], numeric));
    }

    Ok(GradCheckReport {
        max_rel_err,
        pass: max_rel_err < tolerance,
    })
}
