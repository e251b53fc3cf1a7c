//! Neural-collapse geometry of classifier features and the error bound of the
//! one-step edit approximation.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::diffusion::{forward_noise, predict_x0, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::models::{ClassifierModel, Codec, DenoiserModel};
use crate::semantic::SemanticEmbedding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    /// Globally centered class means, one row per class.
    pub mu: Vec<Vec<f64>>,
    pub global_mean: Vec<f64>,
    pub sigma_b: Vec<Vec<f64>>,
    pub sigma_w: Vec<Vec<f64>>,
    pub sigma_t: Vec<Vec<f64>>,
    pub etf_cos: Vec<Vec<f64>>,
    pub norm_spread: f64,
    pub wa_mu_cos: Vec<f64>,
    pub beta_fit: f64,
    /// `||W - beta M||_F / ||W||_F`.
    pub beta_residual: f64,
    pub collapse_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JensenGapEstimate {
    pub d: usize,
    pub sigma2: f64,
    /// Largest gradient norm seen over the probe set: a lower bound of the supremum.
    pub grad_norm_max: f64,
    pub q_mc: f64,
    pub bound: f64,
    pub n_samples: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0 && nb > 0.0) || !na.is_finite() || !nb.is_finite() {
        return Err(Error::Degenerate(format!("cosine of vectors with norms {na} and {nb}")));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn check_inputs(features: &Tensor, labels: &[usize], k: usize) -> Result<Vec<usize>> {
    if features.shape().len() != 2 || features.rows() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "features {:?} do not match {} labels",
            features.shape(),
            labels.len()
        )));
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::InvalidArgument(format!("label {l} outside 0..{k}")));
        }
        counts[l] += 1;
    }
    if let Some(a) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class: a });
    }
    Ok(counts)
}

fn raw_class_means(features: &Tensor, labels: &[usize], k: usize, counts: &[usize]) -> Vec<Vec<f64>> {
    let p = features.shape()[1];
    let mut means = vec![vec![0.0; p]; k];
    for (i, &l) in labels.iter().enumerate() {
        for (m, v) in means[l].iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    for (m, &c) in means.iter_mut().zip(counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    means
}

/// Class means centered by the unweighted mean of class means.
pub fn class_means(features: &Tensor, labels: &[usize], k: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let counts = check_inputs(features, labels, k)?;
    let raw = raw_class_means(features, labels, k, &counts);
    let p = features.shape()[1];
    let global: Vec<f64> = (0..p).map(|j| raw.iter().map(|m| m[j]).sum::<f64>() / k as f64).collect();
    let mu = raw
        .iter()
        .map(|m| m.iter().zip(&global).map(|(a, g)| a - g).collect())
        .collect();
    Ok((mu, global))
}

fn outer_acc(acc: &mut [Vec<f64>], v: &[f64], w: f64) {
    for (i, row) in acc.iter_mut().enumerate() {
        for (j, a) in row.iter_mut().enumerate() {
            *a += w * v[i] * v[j];
        }
    }
}

/// Between-class, within-class and total covariance. Classes must be balanced.
pub fn covariances(features: &Tensor, labels: &[usize], k: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let counts = check_inputs(features, labels, k)?;
    if counts.iter().any(|&c| c != counts[0]) {
        return Err(Error::Unbalanced(counts));
    }
    let p = features.shape()[1];
    let n = labels.len() as f64;
    let raw = raw_class_means(features, labels, k, &counts);
    let (mu, global) = class_means(features, labels, k)?;
    let mut sb = vec![vec![0.0; p]; p];
    for m in &mu {
        outer_acc(&mut sb, m, 1.0 / k as f64);
    }
    let mut sw = vec![vec![0.0; p]; p];
    let mut st = vec![vec![0.0; p]; p];
    for (i, &l) in labels.iter().enumerate() {
        let h = features.row(i);
        let dw: Vec<f64> = h.iter().zip(&raw[l]).map(|(a, b)| a - b).collect();
        let dt: Vec<f64> = h.iter().zip(&global).map(|(a, b)| a - b).collect();
        outer_acc(&mut sw, &dw, 1.0 / n);
        outer_acc(&mut st, &dt, 1.0 / n);
    }
    Ok((sb, sw, st))
}

/// Pairwise cosines of the class means and their relative norm spread.
pub fn etf_metrics(mu: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, f64)> {
    let norms: Vec<f64> = mu.iter().map(|m| norm(m)).collect();
    if mu.is_empty() || norms.iter().any(|&n| !(n > 0.0)) {
        return Err(Error::Degenerate("class mean with zero norm".into()));
    }
    let k = mu.len();
    let mut cos = vec![vec![1.0; k]; k];
    for a in 0..k {
        for b in a + 1..k {
            let c = cosine(&mu[a], &mu[b])?;
            cos[a][b] = c;
            cos[b][a] = c;
        }
    }
    let max = norms.iter().cloned().fold(f64::MIN, f64::max);
    let min = norms.iter().cloned().fold(f64::MAX, f64::min);
    let mean = norms.iter().sum::<f64>() / k as f64;
    Ok((cos, (max - min) / mean))
}

fn alignment(w: &[Vec<f64>], mu: &[Vec<f64>]) -> Result<Vec<f64>> {
    if w.len() != mu.len() {
        return Err(Error::InvalidArgument(format!("{} head rows vs {} class means", w.len(), mu.len())));
    }
    w.iter().zip(mu).map(|(a, b)| cosine(a, b)).collect()
}

/// Cosine between each head row `w_a` and the centered class mean of `features`.
pub fn head_mean_alignment(classifier: &ClassifierModel, features: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (mu, _) = class_means(features, labels, classifier.classes())?;
    alignment(&classifier.head_weights(), &mu)
}

/// Least-squares scale `beta` with `W ~ beta M` and the relative residual.
pub fn beta_fit(w: &[Vec<f64>], m: &[Vec<f64>]) -> Result<(f64, f64)> {
    let wm: f64 = w.iter().zip(m).map(|(a, b)| dot(a, b)).sum();
    let mm: f64 = m.iter().map(|r| dot(r, r)).sum();
    let ww: f64 = w.iter().map(|r| dot(r, r)).sum();
    if !(mm > 0.0 && ww > 0.0) {
        return Err(Error::Degenerate("zero matrix in beta fit".into()));
    }
    let beta = wm / mm;
    let res: f64 = w
        .iter()
        .zip(m)
        .flat_map(|(a, b)| a.iter().zip(b).map(move |(x, y)| (x - beta * y).powi(2)))
        .sum();
    Ok((beta, (res / ww).sqrt()))
}

/// Full collapse geometry of the classifier on labeled inputs.
pub fn collapse_report(classifier: &ClassifierModel, x: &Tensor, labels: &[usize]) -> Result<CollapseReport> {
    let k = classifier.classes();
    let h = classifier.features(x)?;
    let (mu, global_mean) = class_means(&h, labels, k)?;
    let (sigma_b, sigma_w, sigma_t) = covariances(&h, labels, k)?;
    let (etf_cos, norm_spread) = etf_metrics(&mu)?;
    let w = classifier.head_weights();
    let wa_mu_cos = alignment(&w, &mu)?;
    let (beta_fit, beta_residual) = beta_fit(&w, &mu)?;
    let trace = |m: &[Vec<f64>]| (0..m.len()).map(|i| m[i][i]).sum::<f64>();
    let tb = trace(&sigma_b);
    if !(tb > 0.0) {
        return Err(Error::Degenerate("between-class covariance has zero trace".into()));
    }
    Ok(CollapseReport {
        collapse_ratio: trace(&sigma_w) / tb,
        mu,
        global_mean,
        sigma_b,
        sigma_w,
        sigma_t,
        etf_cos,
        norm_spread,
        wa_mu_cos,
        beta_fit,
        beta_residual,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedAlignment {
    /// Centered mean feature of generated images, one row per class.
    pub mu_prime: Vec<Vec<f64>>,
    pub cosines: Vec<f64>,
    pub beta_fit: f64,
    pub beta_residual: f64,
}

/// Alignment between head rows and the centered mean feature of images
/// generated toward each class. `generate(a, sources)` produces the class-`a`
/// images from `sources[a]`.
pub fn generated_alignment(
    classifier: &ClassifierModel,
    sources: &[Tensor],
    mut generate: impl FnMut(usize, &Tensor) -> Result<Tensor>,
) -> Result<GeneratedAlignment> {
    let k = classifier.classes();
    if sources.len() != k {
        return Err(Error::InvalidArgument(format!("{} source sets for {k} classes", sources.len())));
    }
    let mut means = Vec::with_capacity(k);
    for (a, x) in sources.iter().enumerate() {
        if x.rows() == 0 {
            return Err(Error::EmptyClass { class: a });
        }
        let h = classifier.features(&generate(a, x)?)?;
        let p = h.shape()[1];
        let n = h.rows() as f64;
        means.push((0..p).map(|j| (0..h.rows()).map(|i| h.row(i)[j]).sum::<f64>() / n).collect::<Vec<f64>>());
    }
    let p = means[0].len();
    let global: Vec<f64> = (0..p).map(|j| means.iter().map(|m| m[j]).sum::<f64>() / k as f64).collect();
    let mu_prime: Vec<Vec<f64>> = means
        .iter()
        .map(|m| m.iter().zip(&global).map(|(a, g)| a - g).collect())
        .collect();
    let w = classifier.head_weights();
    let cosines = alignment(&w, &mu_prime)?;
    let (beta_fit, beta_residual) = beta_fit(&w, &mu_prime)?;
    Ok(GeneratedAlignment {
        mu_prime,
        cosines,
        beta_fit,
        beta_residual,
    })
}

/// `(d / sqrt(2 pi sigma2)) * exp(-1 / (2 sigma2))`.
pub fn jensen_prefactor(d: usize, sigma2: f64) -> f64 {
    d as f64 / (2.0 * PI * sigma2).sqrt() * (-1.0 / (2.0 * sigma2)).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JensenConfig {
    pub l: usize,
    pub sigma2: f64,
    /// Latents probed for the gradient norm: half clean encodings, half noised.
    pub n_probe: usize,
    /// Noise draws per image for the Monte-Carlo estimate.
    pub n_noise: usize,
    pub target: usize,
    pub seed: u64,
}

impl Default for JensenConfig {
    fn default() -> Self {
        JensenConfig {
            l: 400,
            sigma2: 1.0,
            n_probe: 64,
            n_noise: 4,
            target: 0,
            seed: 0,
        }
    }
}

/// Largest norm of the gradient of logit `target` of `classifier(decode(z))` over the rows of `z`.
pub fn max_logit_grad_norm(classifier: &ClassifierModel, codec: &Codec, z: &Tensor, target: usize) -> Result<f64> {
    let k = classifier.classes();
    if target >= k {
        return Err(Error::InvalidArgument(format!("target {target} outside 0..{k}")));
    }
    let mut tape = Tape::new();
    let cv = codec.bind(&mut tape);
    let clv = classifier.bind(&mut tape, false);
    let zv = tape.variable(z);
    let x = codec.decode_var(&mut tape, cv.as_ref(), zv)?;
    let logits = classifier.logits_var(&mut tape, &clv, x)?;
    let n = z.rows();
    let pick = tape.constant(vec![n, k], (0..n * k).map(|i| if i % k == target { 1.0 } else { 0.0 }).collect())?;
    let picked = tape.mul(logits, pick)?;
    let total = tape.sum(picked)?;
    tape.backward(total)?;
    let g = tape.grad(zv)?;
    let d = z.shape()[1];
    let max = g.chunks(d).map(norm).fold(0.0, f64::max);
    if !max.is_finite() {
        return Err(Error::Diverged {
            stage: "gradient norm",
            index: 0,
        });
    }
    Ok(max)
}

/// Mean `||z0 - z0_hat||` where `z0_hat` is the one-step clean estimate from
/// `z0` noised to `l`, optionally guided by `guide = (embedding, lambda)`.
pub fn one_step_error(
    denoiser: &DenoiserModel,
    schedule: &NoiseSchedule,
    z0: &Tensor,
    l: usize,
    guide: Option<(&SemanticEmbedding, f64)>,
    n_noise: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..n_noise {
        let eps = Tensor::randn(z0.shape(), 1.0, rng);
        let z = forward_noise(z0, l, &eps, schedule)?;
        let u = denoiser.predict_noise(&z, l, None)?;
        let e = match guide {
            Some((emb, lambda)) => {
                let c = denoiser.predict_noise(&z, l, Some(&emb.tokens))?;
                crate::diffusion::cfg_combine(&u, &c, lambda)?
            }
            None => u,
        };
        let z_hat = predict_x0(&z, &e, l, schedule)?;
        let d = z0.shape()[1];
        total += z0
            .values()
            .chunks(d)
            .zip(z_hat.values().chunks(d))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>();
    }
    Ok(total / (n_noise * z0.rows()) as f64)
}

/// Assembles the error bound `prefactor * grad_norm_max * Q` for data `x`.
pub fn jensen_gap_bound(
    classifier: &ClassifierModel,
    codec: &Codec,
    denoiser: &DenoiserModel,
    schedule: &NoiseSchedule,
    x: &Tensor,
    guide: Option<(&SemanticEmbedding, f64)>,
    cfg: &JensenConfig,
) -> Result<JensenGapEstimate> {
    if cfg.n_probe == 0 || cfg.n_noise == 0 || x.rows() == 0 {
        return Err(Error::InvalidArgument("jensen estimate needs n_probe, n_noise and data".into()));
    }
    if cfg.l > schedule.t_max {
        return Err(Error::TimestepOutOfRange {
            t: cfg.l,
            max: schedule.t_max,
        });
    }
    if !(cfg.sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma2 {} must be positive", cfg.sigma2)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let z0 = codec.encode(x)?;
    let clean = cfg.n_probe.div_ceil(2).min(z0.rows());
    let noisy = (cfg.n_probe - clean.min(cfg.n_probe)).min(z0.rows());
    let mut probe = z0.select_rows(&(0..clean).collect::<Vec<_>>());
    if noisy > 0 {
        let base = z0.select_rows(&(0..noisy).collect::<Vec<_>>());
        let eps = Tensor::randn(base.shape(), 1.0, &mut rng);
        let noised = forward_noise(&base, cfg.l, &eps, schedule)?;
        let mut v = probe.into_values();
        v.extend_from_slice(noised.values());
        probe = Tensor::new(vec![clean + noisy, z0.shape()[1]], v)?;
    }
    let grad_norm_max = max_logit_grad_norm(classifier, codec, &probe, cfg.target)?;
    let q_mc = one_step_error(denoiser, schedule, &z0, cfg.l, guide, cfg.n_noise, &mut rng)?;
    if !q_mc.is_finite() {
        return Err(Error::Diverged {
            stage: "one-step error",
            index: cfg.l,
        });
    }
    let d = codec.latent_dim();
    Ok(JensenGapEstimate {
        d,
        sigma2: cfg.sigma2,
        grad_norm_max,
        q_mc,
        bound: jensen_prefactor(d, cfg.sigma2) * grad_norm_max * q_mc,
        n_samples: cfg.n_noise * z0.rows(),
    })
}
