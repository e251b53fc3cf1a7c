use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{assign_params, shuffled, Linear, LinearVars};
use crate::autodiff::{AdamW, AdamWConfig, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub input_dim: usize,
    pub hidden: usize,
    /// Width `p` of the penultimate feature.
    pub feature_dim: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    pub feature_dim: usize,
    /// Std of Gaussian noise added to each training batch (0 disables it).
    pub input_noise: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 60,
            batch: 32,
            lr: 3e-3,
            weight_decay: 1e-2,
            hidden: 64,
            feature_dim: 16,
            input_noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub loss: Vec<f64>,
    pub accuracy: Vec<f64>,
}

/// Two tanh hidden layers (the feature extractor) followed by a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub config: ClassifierConfig,
    hidden: Linear,
    feature: Linear,
    head: Linear,
}

pub struct ClassifierVars {
    hidden: LinearVars,
    feature: LinearVars,
    head: LinearVars,
}

impl ClassifierModel {
    pub fn new(config: ClassifierConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = Linear::init(config.input_dim, config.hidden, 1.0, &mut rng);
        let feature = Linear::init(config.hidden, config.feature_dim, 1.0, &mut rng);
        let head = Linear::init(config.feature_dim, config.classes, 1.0, &mut rng);
        ClassifierModel {
            config,
            hidden,
            feature,
            head,
        }
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Final-layer weights as a `[K, p]` matrix (row `a` is `w_a`).
    pub fn head_weights(&self) -> Vec<Vec<f64>> {
        let (p, k) = (self.config.feature_dim, self.config.classes);
        let w = self.head.w.values();
        (0..k).map(|a| (0..p).map(|j| w[j * k + a]).collect()).collect()
    }

    pub fn head_bias(&self) -> &[f64] {
        self.head.b.values()
    }

    /// Overwrites the head weights from a `[K, p]` row list.
    pub fn set_head_weights(&mut self, rows: &[Vec<f64>]) -> Result<()> {
        let (p, k) = (self.config.feature_dim, self.config.classes);
        if rows.len() != k || rows.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidArgument("head weights must be K x p".into()));
        }
        let w = self.head.w.values_mut();
        for (a, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                w[j * k + a] = *v;
            }
        }
        Ok(())
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("hidden.w".into(), &self.hidden.w),
            ("hidden.b".into(), &self.hidden.b),
            ("feature.w".into(), &self.feature.w),
            ("feature.b".into(), &self.feature.b),
            ("head.w".into(), &self.head.w),
            ("head.b".into(), &self.head.b),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.hidden.params_mut());
        out.extend(self.feature.params_mut());
        out.extend(self.head.params_mut());
        out
    }

    pub fn load_params(&mut self, params: Vec<(String, Tensor)>) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        assign_params(names.into_iter().zip(self.params_mut()).collect(), params)
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> ClassifierVars {
        ClassifierVars {
            hidden: self.hidden.bind(tape, track),
            feature: self.feature.bind(tape, track),
            head: self.head.bind(tape, track),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "classifier_input",
                lhs: shape.to_vec(),
                rhs: vec![0, self.config.input_dim],
            });
        }
        Ok(())
    }

    pub fn features_var(&self, tape: &mut Tape, vars: &ClassifierVars, x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let h = vars.hidden.apply(tape, x)?;
        let h = tape.tanh(h)?;
        let f = vars.feature.apply(tape, h)?;
        tape.tanh(f)
    }

    pub fn head_var(&self, tape: &mut Tape, vars: &ClassifierVars, features: Var) -> Result<Var> {
        vars.head.apply(tape, features)
    }

    pub fn logits_var(&self, tape: &mut Tape, vars: &ClassifierVars, x: Var) -> Result<Var> {
        let f = self.features_var(tape, vars, x)?;
        self.head_var(tape, vars, f)
    }

    /// Penultimate features `[n, p]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.leaf(x);
        let f = self.features_var(&mut tape, &vars, xv)?;
        Ok(tape.to_tensor(f))
    }

    /// Logits `[n, K]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.leaf(x);
        let l = self.logits_var(&mut tape, &vars, xv)?;
        Ok(tape.to_tensor(l))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    fn accumulate(&mut self, tape: &Tape, vars: &ClassifierVars) -> Result<()> {
        vars.hidden.accumulate(tape, &mut self.hidden)?;
        vars.feature.accumulate(tape, &mut self.feature)?;
        vars.head.accumulate(tape, &mut self.head)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(labels: &[usize], k: usize) -> Vec<f64> {
    let mut v = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        v[i * k + l] = 1.0;
    }
    v
}

/// Weight decay applies to weight matrices only, never to biases.
const DECAY_MASK: [bool; 6] = [true, false, true, false, true, false];

pub fn train_classifier(data: &Tensor, labels: &[usize], cfg: &ClassifierTrainConfig) -> Result<(ClassifierModel, ClassifierReport)> {
    train_classifier_with(data, labels, cfg, |_, _| {})
}

/// Trains with MSE against one-hot targets; `on_epoch` sees the model after every epoch.
pub fn train_classifier_with(
    data: &Tensor,
    labels: &[usize],
    cfg: &ClassifierTrainConfig,
    mut on_epoch: impl FnMut(usize, &ClassifierModel),
) -> Result<(ClassifierModel, ClassifierReport)> {
    let n = data.rows();
    if n == 0 || labels.is_empty() {
        return Err(Error::EmptyData);
    }
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!("{} labels for {n} samples", labels.len())));
    }
    let k = labels.iter().copied().max().unwrap_or(0) + 1;
    let distinct = (0..k).filter(|c| labels.contains(c)).count();
    if distinct < 2 {
        return Err(Error::InvalidArgument(
            "classifier needs at least two classes present".into(),
        ));
    }
    let dim = data.numel() / n;
    let config = ClassifierConfig {
        input_dim: dim,
        hidden: cfg.hidden,
        feature_dim: cfg.feature_dim,
        classes: k,
    };
    let mut model = ClassifierModel::new(config, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut report = ClassifierReport::default();
    for epoch in 0..cfg.epochs {
        let order = shuffled(n, &mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut x = data.select_rows(chunk);
            if cfg.input_noise > 0.0 {
                let noise = Tensor::randn(x.shape(), cfg.input_noise, &mut rng);
                x.values_mut().iter_mut().zip(noise.values()).for_each(|(v, e)| *v += e);
            }
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let xv = tape.leaf(&x);
            let target = tape.constant(vec![chunk.len(), k], one_hot(&y, k))?;
            let logits = model.logits_var(&mut tape, &vars, xv)?;
            let loss = tape.mse(logits, target)?;
            let lv = tape.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    stage: "epoch",
                    index: epoch,
                });
            }
            tape.backward(loss)?;
            model.params_mut().iter_mut().for_each(|p| p.zero_grad());
            model.accumulate(&tape, &vars)?;
            opt.step_masked(&mut model.params_mut(), &DECAY_MASK)?;
            total += lv;
            batches += 1;
        }
        report.loss.push(total / batches as f64);
        report.accuracy.push(model.accuracy(data, labels)?);
        on_epoch(epoch, &model);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn head_decomposition_is_exact() {
        let model = ClassifierModel::new(
            ClassifierConfig {
                input_dim: 5,
                hidden: 7,
                feature_dim: 4,
                classes: 3,
            },
            2,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let f = model.features(&x).unwrap();
        let logits = model.logits(&x).unwrap();
        let w = model.head_weights();
        let b = model.head_bias();
        for i in 0..6 {
            for a in 0..3 {
                let dot: f64 = w[a].iter().zip(f.row(i)).map(|(p, q)| p * q).sum();
                assert!((logits.row(i)[a] - (dot + b[a])).abs() <= 1e-12);
            }
        }
        assert_eq!(model.features(&x).unwrap(), f);
        assert!(model.features(&Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn zero_input_features_match_bias_path() {
        let model = ClassifierModel::new(
            ClassifierConfig {
                input_dim: 3,
                hidden: 4,
                feature_dim: 2,
                classes: 2,
            },
            5,
        );
        let f = model.features(&Tensor::zeros(&[1, 3])).unwrap();
        let params = model.named_params();
        let (b1, w2, b2) = (params[1].1.values(), params[2].1.values(), params[3].1.values());
        for j in 0..2 {
            let mut acc = b2[j];
            for i in 0..4 {
                acc += b1[i].tanh() * w2[i * 2 + j];
            }
            assert!((f.values()[j] - acc.tanh()).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_class_rejected() {
        let x = Tensor::zeros(&[4, 2]);
        let err = train_classifier(&x, &[1, 1, 1, 1], &ClassifierTrainConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn untrained_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 400;
        let x = Tensor::randn(&[n, 6], 1.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let cfg = ClassifierTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (m, _) = train_classifier(&x, &labels, &cfg).unwrap();
        let acc = m.accuracy(&x, &labels).unwrap();
        // 4 binomial standard deviations at n = 400
        assert!((acc - 0.5).abs() < 0.1, "{acc}");
    }
}
