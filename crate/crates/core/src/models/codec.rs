use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{assign_params, shuffled, Linear, LinearVars};
use crate::autodiff::{AdamW, AdamWConfig, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Learned autoencoder: `D -> hidden -> latent -> hidden -> D` with tanh hidden layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedCodec {
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
}

pub struct CodecVars {
    enc1: LinearVars,
    enc2: LinearVars,
    dec1: LinearVars,
    dec2: LinearVars,
}

/// Conversion between data and latent space.
#[derive(Clone, Debug, PartialEq)]
pub enum Codec {
    Identity { dim: usize },
    Learned(LearnedCodec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            latent_dim: 32,
            hidden: 128,
            epochs: 200,
            batch: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

impl LearnedCodec {
    pub fn new(data_dim: usize, hidden: usize, latent_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LearnedCodec {
            enc1: Linear::init(data_dim, hidden, 1.0, &mut rng),
            enc2: Linear::init(hidden, latent_dim, 1.0, &mut rng),
            dec1: Linear::init(latent_dim, hidden, 1.0, &mut rng),
            dec2: Linear::init(hidden, data_dim, 1.0, &mut rng),
        }
    }

    fn layers(&self) -> [&Linear; 4] {
        [&self.enc1, &self.enc2, &self.dec1, &self.dec2]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in [&mut self.enc1, &mut self.enc2, &mut self.dec1, &mut self.dec2] {
            out.extend(l.params_mut());
        }
        out
    }

    fn accumulate(&mut self, tape: &Tape, v: &CodecVars) -> Result<()> {
        v.enc1.accumulate(tape, &mut self.enc1)?;
        v.enc2.accumulate(tape, &mut self.enc2)?;
        v.dec1.accumulate(tape, &mut self.dec1)?;
        v.dec2.accumulate(tape, &mut self.dec2)
    }
}

impl Codec {
    pub fn data_dim(&self) -> usize {
        match self {
            Codec::Identity { dim } => *dim,
            Codec::Learned(c) => c.enc1.in_dim(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Codec::Identity { dim } => *dim,
            Codec::Learned(c) => c.enc2.out_dim(),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Codec::Identity { .. } => Vec::new(),
            Codec::Learned(c) => {
                let names = ["enc1", "enc2", "dec1", "dec2"];
                names
                    .iter()
                    .zip(c.layers())
                    .flat_map(|(n, l)| [(format!("{n}.w"), &l.w), (format!("{n}.b"), &l.b)])
                    .collect()
            }
        }
    }

    pub fn load_params(&mut self, params: Vec<(String, Tensor)>) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        match self {
            Codec::Identity { .. } => assign_params(Vec::new(), params),
            Codec::Learned(c) => assign_params(names.into_iter().zip(c.params_mut()).collect(), params),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Option<CodecVars> {
        match self {
            Codec::Identity { .. } => None,
            Codec::Learned(c) => Some(CodecVars {
                enc1: c.enc1.bind(tape, false),
                enc2: c.enc2.bind(tape, false),
                dec1: c.dec1.bind(tape, false),
                dec2: c.dec2.bind(tape, false),
            }),
        }
    }

    fn check(&self, op: &'static str, shape: &[usize], dim: usize) -> Result<()> {
        if shape.len() != 2 || shape[1] != dim {
            return Err(Error::ShapeMismatch {
                op,
                lhs: shape.to_vec(),
                rhs: vec![0, dim],
            });
        }
        Ok(())
    }

    pub fn encode_var(&self, tape: &mut Tape, vars: Option<&CodecVars>, x: Var) -> Result<Var> {
        self.check("codec_encode", tape.shape(x), self.data_dim())?;
        match vars {
            None => Ok(x),
            Some(v) => {
                let h = v.enc1.apply(tape, x)?;
                let h = tape.tanh(h)?;
                v.enc2.apply(tape, h)
            }
        }
    }

    pub fn decode_var(&self, tape: &mut Tape, vars: Option<&CodecVars>, z: Var) -> Result<Var> {
        self.check("codec_decode", tape.shape(z), self.latent_dim())?;
        match vars {
            None => Ok(z),
            Some(v) => {
                let h = v.dec1.apply(tape, z)?;
                let h = tape.tanh(h)?;
                v.dec2.apply(tape, h)
            }
        }
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        if let Codec::Identity { dim } = self {
            self.check("codec_encode", x.shape(), *dim)?;
            return Ok(x.clone());
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.leaf(x);
        let z = self.encode_var(&mut tape, vars.as_ref(), xv)?;
        Ok(tape.to_tensor(z))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if let Codec::Identity { dim } = self {
            self.check("codec_decode", z.shape(), *dim)?;
            return Ok(z.clone());
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let zv = tape.leaf(z);
        let x = self.decode_var(&mut tape, vars.as_ref(), zv)?;
        Ok(tape.to_tensor(x))
    }
}

/// Trains a learned codec by MSE reconstruction; returns it with per-epoch mean loss.
pub fn train_codec(data: &Tensor, cfg: &CodecTrainConfig) -> Result<(Codec, Vec<f64>)> {
    let n = data.rows();
    if n == 0 || data.numel() == 0 {
        return Err(Error::EmptyData);
    }
    let dim = data.numel() / n;
    let mut codec = LearnedCodec::new(dim, cfg.hidden, cfg.latent_dim, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        ..AdamWConfig::default()
    });
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in shuffled(n, &mut rng).chunks(cfg.batch.max(1)) {
            let x = data.select_rows(chunk);
            let mut tape = Tape::new();
            let v = CodecVars {
                enc1: codec.enc1.bind(&mut tape, true),
                enc2: codec.enc2.bind(&mut tape, true),
                dec1: codec.dec1.bind(&mut tape, true),
                dec2: codec.dec2.bind(&mut tape, true),
            };
            let xv = tape.leaf(&x);
            let h = v.enc1.apply(&mut tape, xv)?;
            let h = tape.tanh(h)?;
            let z = v.enc2.apply(&mut tape, h)?;
            let h = v.dec1.apply(&mut tape, z)?;
            let h = tape.tanh(h)?;
            let y = v.dec2.apply(&mut tape, h)?;
            let loss = tape.mse(y, xv)?;
            let lv = tape.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    stage: "epoch",
                    index: epoch,
                });
            }
            tape.backward(loss)?;
            codec.params_mut().iter_mut().for_each(|p| p.zero_grad());
            codec.accumulate(&tape, &v)?;
            opt.step(&mut codec.params_mut())?;
            total += lv;
            batches += 1;
        }
        losses.push(total / batches as f64);
    }
    Ok((Codec::Learned(codec), losses))
}
