//! Gradient verification against central finite differences.

use crate::error::{Error, Result};

use super::{Tape, Tensor};

/// Denominator floor for the relative error. Keeps finite-difference noise
/// (around 1e-10 for losses of order one) from dominating near-zero gradients.
const REL_ERROR_FLOOR: f64 = 1e-3;

/// Compare analytic gradients of a scalar-valued graph against central
/// finite differences, returning the maximum relative error over every
/// element of `inputs`.
///
/// `f` must rebuild the same graph on each call; `inputs` are the leaf
/// tensors it reads, each of which must carry a gradient buffer. The relative
/// error of a pair `(a, n)` is `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn grad_check<F>(mut f: F, inputs: &[&Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("grad_check eps must be positive, got {eps}")));
    }
    for t in inputs {
        if !t.requires_grad() {
            return Err(Error::Config(
                "grad_check inputs must carry gradient buffers".into(),
            ));
        }
        t.zero_grad();
    }

    let mut tape = Tape::new();
    let loss = f(&mut tape)?;
    if !loss.is_scalar() {
        return Err(Error::Dimension {
            op: "grad_check",
            lhs: loss.shape_string(),
            rhs: "1x1 scalar".into(),
        });
    }
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().expect("checked above"))
        .collect();

    let eval = |f: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape)?;
        Ok(out.get(0, 0))
    };

    let mut max_rel = 0.0_f64;
    for (ti, t) in inputs.iter().enumerate() {
        let (rows, cols) = t.shape();
        for r in 0..rows {
            for c in 0..cols {
                t.add_to_value(r, c, eps);
                let plus = eval(&mut f)?;
                t.add_to_value(r, c, -2.0 * eps);
                let minus = eval(&mut f)?;
                t.add_to_value(r, c, eps);
                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic[ti][r * cols + c];
                let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
                max_rel = max_rel.max((a - numeric).abs() / denom);
            }
        }
    }
    Ok(max_rel)
}
