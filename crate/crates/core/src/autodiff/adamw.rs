use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` using their accumulated gradients.
    ///
    /// The parameter list must keep the same order and shapes across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        let all = vec![true; params.len()];
        self.step_masked(params, &all)
    }

    /// Like [`AdamW::step`], but weight decay only touches parameters whose
    /// `decay` flag is set.
    pub fn step_masked(&mut self, params: &mut [&mut Tensor], decay: &[bool]) -> Result<()> {
        if decay.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} decay flags for {} parameters",
                decay.len(),
                params.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::MissingGrad(format!("#{i}")));
            }
            if p.numel() != self.first[i].len() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![self.first[i].len()],
                });
            }
        }

        self.step += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let shrink = if decay[i] { 1.0 - lr * weight_decay } else { 1.0 };
            let g = p.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in p.values_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w * shrink - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(v).into_param();
        t.accumulate_grad(&[g]).unwrap();
        t
    }

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let mut p = param(0.7, 0.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..5 {
            opt.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.values()[0], 0.7);
        assert_eq!(opt.steps(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = param(1.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut [&mut p]).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        let expected = 1.0 - 0.01 / (1.0 + 1e-8);
        assert!((p.values()[0] - expected).abs() < 1e-15);
        assert!((1.0 - p.values()[0] - 0.01).abs() < 1e-9);
        assert_eq!(p.grad().unwrap(), &[1.0]);
    }

    #[test]
    fn pure_decay_shrinks_by_factor() {
        let mut p = param(2.0, 0.0);
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.values()[0], 2.0 * (1.0 - 0.01 * 0.5));
    }

    #[test]
    fn masked_parameters_skip_decay() {
        let mut a = param(2.0, 0.0);
        let mut b = param(2.0, 0.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::default()
        });
        opt.step_masked(&mut [&mut a, &mut b], &[true, false]).unwrap();
        assert_eq!(a.values()[0], 2.0 * (1.0 - 0.01 * 0.5));
        assert_eq!(b.values()[0], 2.0);
        assert!(opt.step_masked(&mut [&mut a], &[true, false]).is_err());
    }

    #[test]
    fn missing_grad_is_error() {
        let mut p = Tensor::scalar(1.0).into_param();
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut [&mut p]), Err(Error::MissingGrad(_))));
    }
}
