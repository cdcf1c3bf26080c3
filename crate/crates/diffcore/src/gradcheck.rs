//! Central finite-difference verification of tape gradients.

use crate::error::{DiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of a scalar function against central
/// differences with step `eps`.
///
/// `f` receives a fresh tape and one differentiable leaf per entry of
/// `params`; it must be deterministic. Returns the maximum over all entries of
/// `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
///
/// The floor keeps entries whose true gradient is exactly zero (for example
/// attention key biases, which softmax ignores) from dividing central
/// difference round-off, about `1e-16 * |f| / eps`, by nothing.
pub fn grad_check<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut eval = |values: &[Tensor], grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.leaf(t.clone(), grad))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let loss = tape.value(out).data()[0];
        let mut grads = Vec::new();
        if grad {
            let g = tape.backward(out)?;
            for (v, t) in vars.iter().zip(values) {
                grads.push(g.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())));
            }
        }
        Ok((loss, grads))
    };

    let (_, analytic) = eval(params, true)?;
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        for e in 0..params[p].len() {
            let orig = work[p].data()[e];
            work[p].data_mut()[e] = orig + eps;
            let (up, _) = eval(&work, false)?;
            work[p].data_mut()[e] = orig - eps;
            let (down, _) = eval(&work, false)?;
            work[p].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[p].data()[e];
            if !a.is_finite() {
                return Err(DiffError::NonFiniteGradient {
                    kind: "analytic",
                    param: p,
                    entry: e,
                });
            }
            if !numeric.is_finite() {
                return Err(DiffError::NonFiniteGradient {
                    kind: "numeric",
                    param: p,
                    entry: e,
                });
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
