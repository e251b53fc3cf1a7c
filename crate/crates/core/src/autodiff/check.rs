//! Central finite-difference check of tape gradients.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest gradient norm below which the error is measured in absolute terms.
const ABS_FLOOR: f64 = 1e-7;

/// Per-input analytic gradients of the scalar `f(inputs)`.
pub fn analytic_grads(inputs: &[Tensor], f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    vars.iter().map(|&v| tape.grad(v)).collect()
}

fn evaluate(inputs: &[Tensor], f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    Ok(v[0])
}

/// Central differences with step `h` for every entry of every input.
pub fn numeric_grads(inputs: &[Tensor], f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>, h: f64) -> Result<Vec<Vec<f64>>> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let x = inputs[i].values()[j];
            work[i].values_mut()[j] = x + h;
            let up = evaluate(&work, f)?;
            work[i].values_mut()[j] = x - h;
            let down = evaluate(&work, f)?;
            work[i].values_mut()[j] = x;
            *gj = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// `||a - n|| / max(||a||, ||n||)`, or the absolute difference when both
/// gradients are tiny.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < ABS_FLOOR {
        diff
    } else {
        diff / scale
    }
}

/// Worst relative error between analytic and finite-difference gradients
/// over all inputs.
pub fn gradient_error(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, h: f64) -> Result<f64> {
    let a = analytic_grads(inputs, &f)?;
    let n = numeric_grads(inputs, &f, h)?;
    Ok(a.iter().zip(&n).map(|(x, y)| relative_error(x, y)).fold(0.0, f64::max))
}
