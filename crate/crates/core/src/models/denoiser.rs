//! Conditional noise predictor: a residual MLP whose blocks all receive the
//! sum of a timestep embedding and a projected, mean-pooled condition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{assign_params, bind_one, shuffled, Linear, LinearVars};
use crate::autodiff::{AdamW, AdamWConfig, Tape, Tensor, Var};
use crate::diffusion::{NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub condition_dim: usize,
    /// Number of classes of each conditioning attribute.
    pub attr_classes: Vec<usize>,
}

impl DenoiserConfig {
    pub fn for_latent(latent_dim: usize, attr_classes: Vec<usize>) -> Self {
        DenoiserConfig {
            latent_dim,
            hidden: 192,
            blocks: 3,
            time_dim: 32,
            condition_dim: 32,
            attr_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Probability that the whole condition is replaced by the null embedding.
    pub drop_prob: f64,
    /// Probability that an individual attribute token is replaced by the null embedding.
    pub token_drop_prob: f64,
    /// Anneal the learning rate to zero along a half cosine over the epochs.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        DenoiserTrainConfig {
            epochs: 150,
            batch: 128,
            lr: 2e-3,
            weight_decay: 0.0,
            drop_prob: 0.1,
            token_drop_prob: 0.2,
            cosine_decay: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    input: Linear,
    time: Linear,
    /// Condition-injection map `[condition_dim, hidden]`.
    cond_proj: Tensor,
    /// One row per (attribute, class) pair.
    label_table: Tensor,
    /// The learned null condition `[1, condition_dim]`.
    null_embedding: Tensor,
    blocks: Vec<(Linear, Linear)>,
    output: Linear,
}

pub struct DenoiserVars {
    input: LinearVars,
    time: LinearVars,
    cond_proj: Var,
    label_table: Var,
    null_embedding: Var,
    blocks: Vec<(LinearVars, LinearVars)>,
    output: LinearVars,
}

/// Sinusoidal timestep features, one row per entry of `ts`.
pub fn time_features(ts: &[usize], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for k in 0..half {
            let freq = (-(10000f64).ln() * k as f64 / half as f64).exp();
            out.push((t as f64 * freq).sin());
        }
        for k in 0..half {
            let freq = (-(10000f64).ln() * k as f64 / half as f64).exp();
            out.push((t as f64 * freq).cos());
        }
        out.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    out
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, c) = (config.latent_dim, config.hidden, config.condition_dim);
        let rows: usize = config.attr_classes.iter().sum();
        let input = Linear::init(d, h, 1.0, &mut rng);
        let time = Linear::init(config.time_dim, h, 1.0, &mut rng);
        let cond_proj = Tensor::randn(&[c, h], 1.0 / (c as f64).sqrt(), &mut rng).into_param();
        let label_table = Tensor::randn(&[rows, c], 1.0, &mut rng).into_param();
        let null_embedding = Tensor::randn(&[1, c], 1.0, &mut rng).into_param();
        let blocks = (0..config.blocks)
            .map(|_| {
                (
                    Linear::init(h, h, 1.0, &mut rng),
                    Linear::init(h, h, 0.5, &mut rng),
                )
            })
            .collect();
        let output = Linear::init(h, d, 1.0, &mut rng);
        DenoiserModel {
            config,
            input,
            time,
            cond_proj,
            label_table,
            null_embedding,
            blocks,
            output,
        }
    }

    pub fn condition_dim(&self) -> usize {
        self.config.condition_dim
    }

    pub fn null_embedding(&self) -> &Tensor {
        &self.null_embedding
    }

    /// Tokens `[n_attr, condition_dim]` for a full label assignment, one row per attribute.
    pub fn label_tokens(&self, labels: &[Option<usize>]) -> Result<Tensor> {
        let c = self.config.condition_dim;
        if labels.len() != self.config.attr_classes.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} attribute labels, got {}",
                self.config.attr_classes.len(),
                labels.len()
            )));
        }
        let mut v = Vec::with_capacity(labels.len() * c);
        for (a, l) in labels.iter().enumerate() {
            match l {
                Some(class) => {
                    let row = self.table_row(a, *class)?;
                    v.extend_from_slice(&self.label_table.values()[row * c..(row + 1) * c]);
                }
                None => v.extend_from_slice(self.null_embedding.values()),
            }
        }
        Tensor::new(vec![labels.len(), c], v)
    }

    fn table_row(&self, attr: usize, class: usize) -> Result<usize> {
        let classes = &self.config.attr_classes;
        if attr >= classes.len() || class >= classes[attr] {
            return Err(Error::InvalidArgument(format!(
                "label {class} out of range for attribute {attr}"
            )));
        }
        Ok(classes[..attr].iter().sum::<usize>() + class)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("input.w".to_string(), &self.input.w),
            ("input.b".to_string(), &self.input.b),
            ("time.w".to_string(), &self.time.w),
            ("time.b".to_string(), &self.time.b),
            ("cond_proj".to_string(), &self.cond_proj),
            ("label_table".to_string(), &self.label_table),
            ("null_embedding".to_string(), &self.null_embedding),
        ];
        for (i, (a, b)) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.a.w"), &a.w));
            out.push((format!("block{i}.a.b"), &a.b));
            out.push((format!("block{i}.b.w"), &b.w));
            out.push((format!("block{i}.b.b"), &b.b));
        }
        out.push(("output.w".to_string(), &self.output.w));
        out.push(("output.b".to_string(), &self.output.b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.input.params_mut());
        out.extend(self.time.params_mut());
        out.push(&mut self.cond_proj);
        out.push(&mut self.label_table);
        out.push(&mut self.null_embedding);
        for (a, b) in &mut self.blocks {
            out.extend(a.params_mut());
            out.extend(b.params_mut());
        }
        out.extend(self.output.params_mut());
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        names.into_iter().zip(self.params_mut()).collect()
    }

    pub fn load_params(&mut self, params: Vec<(String, Tensor)>) -> Result<()> {
        assign_params(self.named_params_mut(), params)
    }

    /// Zeroes the condition-injection map, which makes the output label-invariant.
    pub fn zero_condition_injection(&mut self) {
        self.cond_proj.values_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> DenoiserVars {
        DenoiserVars {
            input: self.input.bind(tape, track),
            time: self.time.bind(tape, track),
            cond_proj: bind_one(tape, &self.cond_proj, track),
            label_table: bind_one(tape, &self.label_table, track),
            null_embedding: bind_one(tape, &self.null_embedding, track),
            blocks: self
                .blocks
                .iter()
                .map(|(a, b)| (a.bind(tape, track), b.bind(tape, track)))
                .collect(),
            output: self.output.bind(tape, track),
        }
    }

    fn accumulate(&mut self, tape: &Tape, vars: &DenoiserVars) -> Result<()> {
        vars.input.accumulate(tape, &mut self.input)?;
        vars.time.accumulate(tape, &mut self.time)?;
        tape.accumulate_into(vars.cond_proj, &mut self.cond_proj)?;
        tape.accumulate_into(vars.label_table, &mut self.label_table)?;
        tape.accumulate_into(vars.null_embedding, &mut self.null_embedding)?;
        for ((va, vb), (a, b)) in vars.blocks.iter().zip(&mut self.blocks) {
            va.accumulate(tape, a)?;
            vb.accumulate(tape, b)?;
        }
        vars.output.accumulate(tape, &mut self.output)
    }

    /// Core network: `z: [B, D]`, one timestep per row, pooled condition `cond: [B, C]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &DenoiserVars,
        z: Var,
        ts: &[usize],
        cond: Var,
    ) -> Result<Var> {
        let d = self.config.latent_dim;
        let zs = tape.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != d || zs[0] != ts.len() {
            return Err(Error::ShapeMismatch {
                op: "denoiser_eval",
                lhs: zs,
                rhs: vec![ts.len(), d],
            });
        }
        let cs = tape.shape(cond).to_vec();
        if cs != [ts.len(), self.config.condition_dim] {
            return Err(Error::ShapeMismatch {
                op: "denoiser_condition",
                lhs: cs,
                rhs: vec![ts.len(), self.config.condition_dim],
            });
        }
        let tf = tape.constant(
            vec![ts.len(), self.config.time_dim],
            time_features(ts, self.config.time_dim),
        )?;
        let te = vars.time.apply(tape, tf)?;
        let te = tape.tanh(te)?;
        let ce = tape.matmul(cond, vars.cond_proj)?;
        let emb = tape.add(te, ce)?;

        let mut h = vars.input.apply(tape, z)?;
        for (a, b) in &vars.blocks {
            let x = tape.add(h, emb)?;
            let u = a.apply(tape, x)?;
            let u = tape.tanh(u)?;
            let u = b.apply(tape, u)?;
            h = tape.add(h, u)?;
        }
        let h = tape.tanh(h)?;
        vars.output.apply(tape, h)
    }

    /// Mean-pools a token matrix `[n, C]` and repeats it for a batch.
    pub fn pool_tokens(&self, tape: &mut Tape, tokens: Var, batch: usize) -> Result<Var> {
        let s = tape.shape(tokens).to_vec();
        if s.len() != 2 || s[1] != self.config.condition_dim || s[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "condition_width",
                lhs: s,
                rhs: vec![0, self.config.condition_dim],
            });
        }
        let pooled = tape.mean_rows(tokens)?;
        tape.broadcast_rows(pooled, batch)
    }

    /// Batched evaluation at a single timestep; `tokens = None` is the null condition.
    pub fn eval_var(
        &self,
        tape: &mut Tape,
        vars: &DenoiserVars,
        z: Var,
        t: usize,
        tokens: Option<Var>,
    ) -> Result<Var> {
        let b = tape.shape(z)[0];
        let tokens = tokens.unwrap_or(vars.null_embedding);
        let cond = self.pool_tokens(tape, tokens, b)?;
        self.forward(tape, vars, z, &vec![t; b], cond)
    }
}

impl NoisePredictor for DenoiserModel {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn predict_noise(&self, z: &Tensor, t: usize, cond: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let zv = tape.leaf(z);
        let tokens = cond.map(|c| tape.leaf(c));
        let out = self.eval_var(&mut tape, &vars, zv, t, tokens)?;
        Ok(tape.to_tensor(out))
    }
}

/// Trains the denoiser on latents `data: [n, D]` with per-row attribute labels.
///
/// Returns the model and the mean loss of every epoch.
pub fn train_denoiser(
    model: DenoiserModel,
    data: &Tensor,
    labels: &[Vec<usize>],
    schedule: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
) -> Result<(DenoiserModel, Vec<f64>)> {
    let mut model = model;
    let n = data.rows();
    if n == 0 || data.numel() == 0 {
        return Err(Error::EmptyData);
    }
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    if !(0.0..=1.0).contains(&cfg.drop_prob) || !(0.0..=1.0).contains(&cfg.token_drop_prob) {
        return Err(Error::InvalidArgument("drop probabilities must lie in [0, 1]".into()));
    }
    let n_attr = model.config.attr_classes.len();
    let rows: usize = model.config.attr_classes.iter().sum();
    for l in labels {
        if l.len() != n_attr {
            return Err(Error::InvalidArgument("label arity mismatch".into()));
        }
        for (a, &c) in l.iter().enumerate() {
            model.table_row(a, c)?;
        }
    }

    let d = model.config.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.cosine_decay {
            let frac = epoch as f64 / cfg.epochs as f64;
            opt.config.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        }
        let order = shuffled(n, &mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let b = chunk.len();
            let z0 = data.select_rows(chunk);
            let eps = Tensor::randn(&[b, d], 1.0, &mut rng);
            let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=schedule.t_max)).collect();
            let mut zt = Vec::with_capacity(b * d);
            for (i, &t) in ts.iter().enumerate() {
                let ab = schedule.alpha_bar(t)?;
                let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
                for j in 0..d {
                    zt.push(sa * z0.values()[i * d + j] + sb * eps.values()[i * d + j]);
                }
            }
            // averaging matrix over [label rows; null row]
            let mut sel = vec![0.0; b * (rows + 1)];
            for (i, &idx) in chunk.iter().enumerate() {
                let row = &mut sel[i * (rows + 1)..(i + 1) * (rows + 1)];
                if rng.random::<f64>() < cfg.drop_prob {
                    row[rows] = 1.0;
                    continue;
                }
                let w = 1.0 / n_attr as f64;
                for (a, &c) in labels[idx].iter().enumerate() {
                    if rng.random::<f64>() < cfg.token_drop_prob {
                        row[rows] += w;
                    } else {
                        row[model.table_row(a, c)?] += w;
                    }
                }
            }

            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let zv = tape.constant(vec![b, d], zt)?;
            let target = tape.constant(vec![b, d], eps.into_values())?;
            let selv = tape.constant(vec![b, rows + 1], sel)?;
            let table = tape.concat(&[vars.label_table, vars.null_embedding], 0)?;
            let cond = tape.matmul(selv, table)?;
            let pred = model.forward(&mut tape, &vars, zv, &ts, cond)?;
            let loss = tape.mse(pred, target)?;
            let lv = tape.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    stage: "epoch",
                    index: epoch,
                });
            }
            tape.backward(loss)?;
            let mut params = model.params_mut();
            params.iter_mut().for_each(|p| p.zero_grad());
            drop(params);
            model.accumulate(&tape, &vars)?;
            opt.step(&mut model.params_mut())?;
            total += lv;
            batches += 1;
        }
        losses.push(total / batches as f64);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiserModel {
        let cfg = DenoiserConfig {
            latent_dim: 6,
            hidden: 8,
            blocks: 2,
            time_dim: 4,
            condition_dim: 3,
            attr_classes: vec![2, 2],
        };
        DenoiserModel::new(cfg, 1)
    }

    #[test]
    fn null_condition_is_null_embedding() {
        let m = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let a = m.predict_noise(&z, 10, None).unwrap();
        let b = m.predict_noise(&z, 10, Some(m.null_embedding())).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), z.shape());
    }

    #[test]
    fn bad_condition_width() {
        let m = tiny();
        let z = Tensor::zeros(&[1, 6]);
        assert!(m.predict_noise(&z, 1, Some(&Tensor::zeros(&[2, 4]))).is_err());
        assert!(m.predict_noise(&Tensor::zeros(&[1, 5]), 1, None).is_err());
    }

    #[test]
    fn zero_injection_is_label_invariant() {
        let mut m = tiny();
        let z = Tensor::new(vec![1, 6], vec![0.3, -0.1, 0.2, 0.0, 1.0, -0.5]).unwrap();
        let c0 = m.label_tokens(&[Some(0), Some(1)]).unwrap();
        let c1 = m.label_tokens(&[Some(1), None]).unwrap();
        assert_ne!(m.predict_noise(&z, 5, Some(&c0)).unwrap(), m.predict_noise(&z, 5, Some(&c1)).unwrap());
        m.zero_condition_injection();
        assert_eq!(m.predict_noise(&z, 5, Some(&c0)).unwrap(), m.predict_noise(&z, 5, Some(&c1)).unwrap());
    }

    #[test]
    fn zero_epochs_returns_init() {
        let m = tiny();
        let data = Tensor::zeros(&[4, 6]);
        let labels = vec![vec![0, 0]; 4];
        let cfg = DenoiserTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (out, losses) = train_denoiser(m.clone(), &data, &labels, &NoiseSchedule::standard(), &cfg).unwrap();
        assert_eq!(out, m);
        assert!(losses.is_empty());
        assert!(matches!(
            train_denoiser(m, &Tensor::zeros(&[0, 6]), &[], &NoiseSchedule::standard(), &cfg),
            Err(Error::EmptyData)
        ));
    }

    #[test]
    fn time_features_shape() {
        let f = time_features(&[0, 7], 5);
        assert_eq!(f.len(), 10);
        assert_eq!(&f[0..5], &[0.0, 0.0, 1.0, 1.0, 0.0]);
    }
}
