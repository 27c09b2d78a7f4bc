//! Central finite-difference validation of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences and returns
/// `max |analytic - numeric| / max(1, |numeric|)` over every input element.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(contract_err!("eps {eps} outside [1e-7, 1e-3]"));
    }
    if inputs.iter().any(|t| !t.all_finite()) {
        return Err(contract_err!("grad_check inputs must be finite"));
    }

    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros_like(t)))
        .collect();
    drop(tape);

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.numel() {
            let orig = input.data()[k];
            probe[i].data_mut()[k] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[k] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic[i].data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(contract_err!(
            "grad_check function must return a scalar, got shape {:?}",
            t.shape()
        ));
    }
    Ok(t.item())
}
