//! Random computation graphs over every tape primitive, and a small but
//! complete editing pipeline, for finite-difference checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semedit::autodiff::check::{analytic_grads, gradient_error};
use semedit::autodiff::{Tape, Tensor, Var};
use semedit::diffusion::NoiseSchedule;
use semedit::models::{ClassifierConfig, ClassifierModel, Codec, DenoiserConfig, DenoiserModel, LearnedCodec};
use semedit::semantic::{record_objective, EditConfig, Editor};
use semedit::Result;

pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Instr {
    Tanh,
    Relu,
    Softmax,
    Affine(f64, f64),
    Add,
    Sub,
    Mul,
    MatMul,
    Linear,
    MeanRows(usize),
    Concat(usize),
    Slice(usize, usize),
}

#[derive(Clone, Copy, Debug)]
enum Reduce {
    Sum,
    Mean,
    Mse,
}

/// A random program with its input tensors.
pub struct RandomGraph {
    pub inputs: Vec<Tensor>,
    program: Vec<Instr>,
    reduce: Reduce,
}

impl RandomGraph {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut r, mut c) = (rng.random_range(1..4usize), rng.random_range(1..4usize));
        let mut inputs = vec![Tensor::randn(&[r, c], 1.0, &mut rng)];
        let mut program = Vec::new();
        for _ in 0..rng.random_range(3..8) {
            let instr = match rng.random_range(0..12) {
                0 => Instr::Tanh,
                1 => Instr::Relu,
                2 => Instr::Softmax,
                3 => Instr::Affine(rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)),
                4 => Instr::Add,
                5 => Instr::Sub,
                6 => Instr::Mul,
                7 => Instr::MatMul,
                8 => Instr::Linear,
                9 => Instr::MeanRows(rng.random_range(1..4)),
                10 => Instr::Concat(rng.random_range(0..2)),
                _ if r > 1 => {
                    let start = rng.random_range(0..r - 1);
                    Instr::Slice(start, rng.random_range(start + 1..=r))
                }
                _ => Instr::Tanh,
            };
            match instr {
                Instr::Add | Instr::Sub | Instr::Mul => inputs.push(Tensor::randn(&[r, c], 1.0, &mut rng)),
                Instr::MatMul | Instr::Linear => {
                    let m = rng.random_range(1..4);
                    inputs.push(Tensor::randn(&[c, m], 1.0, &mut rng));
                    if matches!(instr, Instr::Linear) {
                        inputs.push(Tensor::randn(&[1, m], 1.0, &mut rng));
                    }
                    c = m;
                }
                Instr::MeanRows(n) => r = n,
                Instr::Concat(axis) => {
                    let extra = rng.random_range(1..3);
                    if axis == 0 {
                        inputs.push(Tensor::randn(&[extra, c], 1.0, &mut rng));
                        r += extra;
                    } else {
                        inputs.push(Tensor::randn(&[r, extra], 1.0, &mut rng));
                        c += extra;
                    }
                }
                Instr::Slice(a, b) => r = b - a,
                _ => {}
            }
            program.push(instr);
        }
        let reduce = match rng.random_range(0..3) {
            0 => Reduce::Sum,
            1 => Reduce::Mean,
            _ => {
                inputs.push(Tensor::randn(&[r, c], 1.0, &mut rng));
                Reduce::Mse
            }
        };
        RandomGraph {
            inputs,
            program,
            reduce,
        }
    }

    pub fn record(&self, t: &mut Tape, v: &[Var]) -> Result<Var> {
        let mut next = 1;
        let mut take = || {
            next += 1;
            v[next - 1]
        };
        let mut x = v[0];
        for instr in &self.program {
            x = match *instr {
                Instr::Tanh => t.tanh(x)?,
                Instr::Relu => t.relu(x)?,
                Instr::Softmax => t.softmax(x)?,
                Instr::Affine(s, b) => t.affine(x, s, b)?,
                Instr::Add => t.add(x, take())?,
                Instr::Sub => t.sub(x, take())?,
                Instr::Mul => t.mul(x, take())?,
                Instr::MatMul => t.matmul(x, take())?,
                Instr::Linear => {
                    let w = take();
                    let b = take();
                    t.linear(x, w, b)?
                }
                Instr::MeanRows(n) => {
                    let m = t.mean_rows(x)?;
                    t.broadcast_rows(m, n)?
                }
                Instr::Concat(axis) => t.concat(&[x, take()], axis)?,
                Instr::Slice(a, b) => t.slice_rows(x, a, b)?,
            };
        }
        match self.reduce {
            Reduce::Sum => t.sum(x),
            Reduce::Mean => t.mean(x),
            Reduce::Mse => t.mse(x, take()),
        }
    }

    pub fn error(&self) -> Result<f64> {
        gradient_error(&self.inputs, |t, v| self.record(t, v), STEP)
    }
}

fn jitter(params: Vec<&mut Tensor>, std: f64, rng: &mut ChaCha8Rng) {
    for p in params {
        let noise = Tensor::randn(p.shape(), std, rng);
        p.values_mut().iter_mut().zip(noise.values()).for_each(|(a, b)| *a += b);
    }
}

/// Error of the gradient of the full embedding objective (encode, noise,
/// guided noise prediction, one-step estimate, decode, classify) with
/// respect to the per-class condition tokens, with the analytic gradient norm.
pub fn pipeline_error(seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut den = DenoiserModel::new(
        DenoiserConfig {
            latent_dim: 4,
            hidden: 6,
            blocks: 2,
            time_dim: 4,
            condition_dim: 3,
            attr_classes: vec![2],
        },
        seed,
    );
    jitter(den.params_mut(), 0.3, &mut rng);
    let codec = Codec::Learned(LearnedCodec::new(5, 6, 4, seed + 1));
    let classifier = ClassifierModel::new(
        ClassifierConfig {
            input_dim: 5,
            hidden: 6,
            feature_dim: 3,
            classes: 2,
        },
        seed + 2,
    );
    let schedule = NoiseSchedule::standard();
    let editor = Editor::new(&den, &codec, &schedule);
    let cfg = EditConfig {
        lambda: rng.random_range(1.0..10.0),
        gamma: rng.random_range(0.0..1.0),
        l_frac: rng.random_range(0.1..0.9),
        ..EditConfig::default()
    };
    let x = Tensor::randn(&[3, 5], 0.5, &mut rng);
    let eps = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let tokens = vec![Tensor::randn(&[2, 3], 0.5, &mut rng), Tensor::randn(&[2, 3], 0.5, &mut rng)];
    let f = |t: &mut Tape, v: &[Var]| Ok(record_objective(t, &editor, &classifier, &x, &eps, v, &cfg)?.total);
    let norm = analytic_grads(&tokens, &f)?.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    Ok((gradient_error(&tokens, f, STEP)?, norm))
}
