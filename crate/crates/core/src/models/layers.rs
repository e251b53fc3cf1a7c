use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

/// Dense layer `y = x w + b`, `w: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    /// Gaussian init with std `gain / sqrt(fan_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        Linear {
            w: Tensor::randn(&[fan_in, fan_out], std, rng).into_param(),
            b: Tensor::zeros(&[1, fan_out]).into_param(),
        }
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> LinearVars {
        LinearVars {
            w: bind_one(tape, &self.w, track),
            b: bind_one(tape, &self.b, track),
        }
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.w, &mut self.b]
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }
}

impl LinearVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.w, self.b)
    }

    pub fn accumulate(&self, tape: &Tape, layer: &mut Linear) -> Result<()> {
        tape.accumulate_into(self.w, &mut layer.w)?;
        tape.accumulate_into(self.b, &mut layer.b)
    }
}

pub(crate) fn bind_one(tape: &mut Tape, t: &Tensor, track: bool) -> Var {
    if track {
        tape.variable(t)
    } else {
        tape.constant(t.shape().to_vec(), t.values().to_vec())
            .expect("tensor shape is consistent")
    }
}

/// Fills `dst` (in declaration order) from a name-keyed list.
pub(crate) fn assign_params(
    dst: Vec<(String, &mut Tensor)>,
    src: Vec<(String, Tensor)>,
) -> Result<()> {
    use crate::error::Error;
    let mut src: std::collections::HashMap<String, Tensor> = src.into_iter().collect();
    for (name, slot) in dst {
        let t = src
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::ShapeMismatch {
                op: "load_params",
                lhs: slot.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        slot.values_mut().copy_from_slice(t.values());
    }
    if let Some(extra) = src.keys().next() {
        return Err(Error::Format(format!("unexpected parameter {extra}")));
    }
    Ok(())
}

/// Mini-batch index order for one epoch.
pub(crate) fn shuffled<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
