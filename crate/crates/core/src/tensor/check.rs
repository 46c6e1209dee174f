//! Gradient verification against central finite differences.

use super::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Compare the reverse-mode gradient of `f` at `point` against central
/// finite differences with the given `step`.
///
/// `f` builds a scalar-valued graph from the supplied input node. Returns
/// the max over elements of `|autodiff - central| / max(1e-8, |central|)`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }

    let mut tape = Tape::new();
    let x = tape.leaf(point);
    let out = f(&mut tape, x)?;
    if tape.value(out).len() != 1 {
        return Err(Error::NonScalarOutput(tape.value(out).shape().to_vec()));
    }
    let grad = tape.backward(out)?.wrt(x);

    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(p);
        let out = f(&mut t, x)?;
        let v = t.value(out).item();
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "objective is not finite ({v}) at a perturbed point"
            )));
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let central = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let rel = (grad.data()[i] - central).abs() / central.abs().max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
