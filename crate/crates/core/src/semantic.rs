//! Learned semantic embeddings: optimize condition tokens per class through the
//! classifier and the one-step clean estimate, then use them to edit images.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, Tape, Tensor, Var};
use crate::diffusion::{
    cfg_combine, cfg_combine_var, ddim_denoise_step, forward_noise, invert_loop, invert_loop_guided, predict_x0, predict_x0_var,
    sample_loop, timesteps, GuidanceSpec, LatentState, NoisePredictor, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::models::{one_hot, ClassifierModel, Codec, DenoiserModel};

/// Condition tokens `[n_tokens, condition_dim]` standing for one class (or a
/// concatenation of several).
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbedding {
    /// One class id per concatenated part.
    pub class_ids: Vec<usize>,
    pub tokens: Tensor,
}

impl SemanticEmbedding {
    pub fn new(class_id: usize, tokens: Tensor) -> Result<Self> {
        let s = tokens.shape();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                len: tokens.numel(),
            });
        }
        if !tokens.is_finite() {
            return Err(Error::InvalidArgument("embedding tokens must be finite".into()));
        }
        Ok(SemanticEmbedding {
            class_ids: vec![class_id],
            tokens,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn condition_dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Joins token sequences; the composite class id lists the parts in order.
pub fn concat_embeddings(parts: &[&SemanticEmbedding]) -> Result<SemanticEmbedding> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
    let c = first.condition_dim();
    let mut values = Vec::new();
    let mut class_ids = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.condition_dim() != c {
            return Err(Error::ShapeMismatch {
                op: "concat_embeddings",
                lhs: first.tokens.shape().to_vec(),
                rhs: p.tokens.shape().to_vec(),
            });
        }
        values.extend_from_slice(p.tokens.values());
        class_ids.extend_from_slice(&p.class_ids);
        rows += p.n_tokens();
    }
    Ok(SemanticEmbedding {
        class_ids,
        tokens: Tensor::new(vec![rows, c], values)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub lambda: f64,
    /// Noising depth as a fraction of `T`.
    pub l_frac: f64,
    /// Weight of the latent reconstruction term.
    pub gamma: f64,
    /// Guidance window `(start, stop)` as fractions of `T`.
    pub window: (f64, f64),
    /// DDIM steps for a full `T` trajectory; an edit at depth `L` takes the matching share.
    pub steps: usize,
    pub n_tokens: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            lambda: 10.0,
            l_frac: 0.4,
            gamma: 0.1,
            window: (1.0, 0.0),
            steps: 50,
            n_tokens: 4,
            lr: 1e-2,
            seed: 0,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l_frac > 0.0 && self.l_frac <= 1.0) {
            return Err(Error::InvalidArgument(format!("l_frac {} outside (0, 1]", self.l_frac)));
        }
        if !(self.gamma >= 0.0) || self.steps == 0 || self.n_tokens == 0 || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(
                "edit config needs gamma >= 0, steps >= 1, n_tokens >= 1, finite lambda".into(),
            ));
        }
        GuidanceSpec::new(self.lambda, self.window, None).map(|_| ())
    }

    /// Noising depth `L` in timesteps (at least 1).
    pub fn depth(&self, s: &NoiseSchedule) -> usize {
        s.frac_to_t(self.l_frac).max(1)
    }

    /// DDIM steps between 0 and `L`.
    pub fn edit_steps(&self, s: &NoiseSchedule) -> usize {
        let l = self.depth(s);
        ((self.steps * l) as f64 / s.t_max as f64).round().max(1.0) as usize
    }
}

/// Per-iteration losses of embedding training, plus held-out success.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTrainReport {
    pub edit_loss: Vec<f64>,
    pub rec_loss: Vec<f64>,
    pub combined_loss: Vec<f64>,
    pub gamma: f64,
    /// Fraction of held-out edits that reach the target class, if a held-out set was given.
    pub heldout_success: Option<f64>,
    pub wall_clock_secs: f64,
}

/// The frozen models an edit runs through.
#[derive(Clone, Copy)]
pub struct Editor<'a> {
    pub denoiser: &'a DenoiserModel,
    pub codec: &'a Codec,
    pub schedule: &'a NoiseSchedule,
}

impl<'a> Editor<'a> {
    pub fn new(denoiser: &'a DenoiserModel, codec: &'a Codec, schedule: &'a NoiseSchedule) -> Self {
        Editor {
            denoiser,
            codec,
            schedule,
        }
    }

    /// Encodes and inverts to depth `L`.
    pub fn invert(&self, x: &Tensor, cfg: &EditConfig) -> Result<LatentState> {
        cfg.validate()?;
        let z0 = self.codec.encode(x)?;
        let l = cfg.depth(self.schedule);
        let z = invert_loop(&LatentState { z: z0, t: 0 }, self.denoiser, l, cfg.edit_steps(self.schedule), self.schedule)?;
        Ok(LatentState { z, t: l })
    }

    /// Samples back from an inverted state with the given guidance and decodes.
    pub fn render(&self, z_l: &LatentState, g: &GuidanceSpec, cfg: &EditConfig) -> Result<Tensor> {
        let z = sample_loop(z_l, self.denoiser, g, cfg.edit_steps(self.schedule), self.schedule)?;
        self.codec.decode(&z)
    }

    /// Multi-step edit: guidance active over `cfg.window`.
    pub fn edit(&self, x: &Tensor, e: &SemanticEmbedding, cfg: &EditConfig) -> Result<Tensor> {
        let z_l = self.invert(x, cfg)?;
        let g = GuidanceSpec::new(cfg.lambda, cfg.window, Some(e.tokens.clone()))?;
        self.render(&z_l, &g, cfg)
    }

    /// Edits toward several attributes at once: concatenates the parts and
    /// multiplies the guidance scale by their count.
    pub fn edit_multi(&self, x: &Tensor, parts: &[&SemanticEmbedding], cfg: &EditConfig) -> Result<Tensor> {
        let e = concat_embeddings(parts)?;
        let scaled = EditConfig {
            lambda: cfg.lambda * parts.len() as f64,
            ..cfg.clone()
        };
        self.edit(x, &e, &scaled)
    }

    /// Guidance at a single step: the first grid timestep inside the window.
    /// There the guided clean estimate is re-noised to the next grid point with
    /// the unconditional noise; every other step is unconditional.
    pub fn edit_single_step(&self, x: &Tensor, e: &SemanticEmbedding, cfg: &EditConfig) -> Result<Tensor> {
        let z_l = self.invert(x, cfg)?;
        let s = self.schedule;
        let g = GuidanceSpec::new(cfg.lambda, cfg.window, Some(e.tokens.clone()))?;
        let ts = timesteps(z_l.t, cfg.edit_steps(s));
        let mut z = z_l.z;
        let mut pending = cfg.lambda != 0.0;
        for pair in ts.windows(2).rev() {
            let (t_prev, t) = (pair[0], pair[1]);
            let uncond = self.denoiser.predict_noise(&z, t, None)?;
            if pending && g.in_window(t, s) {
                pending = false;
                let cond = self.denoiser.predict_noise(&z, t, Some(&e.tokens))?;
                let guided = cfg_combine(&uncond, &cond, cfg.lambda)?;
                let x0 = predict_x0(&z, &guided, t, s)?;
                z = forward_noise(&x0, t_prev, &uncond, s)?;
            } else {
                z = ddim_denoise_step(&z, &uncond, t, t_prev, s)?;
            }
        }
        self.codec.decode(&z)
    }

    /// Unconditional inversion and resampling.
    pub fn reconstruct(&self, x: &Tensor, cfg: &EditConfig) -> Result<Tensor> {
        let z_l = self.invert(x, cfg)?;
        self.render(&z_l, &GuidanceSpec::unconditional(), cfg)
    }

    /// Round trip with guided noise predictions in both inversion and
    /// sampling; at `lambda = 0` this is [`Editor::reconstruct`].
    pub fn reconstruct_guided(&self, x: &Tensor, e: &SemanticEmbedding, cfg: &EditConfig) -> Result<Tensor> {
        cfg.validate()?;
        let g = GuidanceSpec::new(cfg.lambda, cfg.window, Some(e.tokens.clone()))?;
        let z0 = self.codec.encode(x)?;
        let l = cfg.depth(self.schedule);
        let z = invert_loop_guided(&LatentState { z: z0, t: 0 }, self.denoiser, &g, l, cfg.edit_steps(self.schedule), self.schedule)?;
        self.render(&LatentState { z, t: l }, &g, cfg)
    }

    /// One edit per guidance scale, sharing a single inversion.
    pub fn interpolate_scale(
        &self,
        x: &Tensor,
        e: &SemanticEmbedding,
        lambdas: &[f64],
        cfg: &EditConfig,
    ) -> Result<Vec<Tensor>> {
        if lambdas.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidArgument("guidance scales must be finite".into()));
        }
        let z_l = self.invert(x, cfg)?;
        lambdas
            .iter()
            .map(|&lambda| {
                let g = GuidanceSpec::new(lambda, cfg.window, Some(e.tokens.clone()))?;
                self.render(&z_l, &g, cfg)
            })
            .collect()
    }

    /// Single-step generator used in training: forward-noise `x` to `L` with
    /// `eps`, take the guided one-step clean estimate and decode it.
    pub fn one_step(&self, x: &Tensor, e: &SemanticEmbedding, eps: &Tensor, cfg: &EditConfig) -> Result<Tensor> {
        let mut tape = Tape::new();
        let dv = self.denoiser.bind(&mut tape, false);
        let cv = self.codec.bind(&mut tape);
        let xv = tape.leaf(x);
        let z0 = self.codec.encode_var(&mut tape, cv.as_ref(), xv)?;
        let ev = tape.leaf(&e.tokens);
        let l = cfg.depth(self.schedule);
        let z_l = noised_var(&mut tape, z0, eps, l, self.schedule)?;
        let u = self.denoiser.eval_var(&mut tape, &dv, z_l, l, None)?;
        let c = self.denoiser.eval_var(&mut tape, &dv, z_l, l, Some(ev))?;
        let guided = cfg_combine_var(&mut tape, u, c, cfg.lambda)?;
        let z_hat = predict_x0_var(&mut tape, z_l, guided, l, self.schedule)?;
        let x_hat = self.codec.decode_var(&mut tape, cv.as_ref(), z_hat)?;
        Ok(tape.to_tensor(x_hat))
    }
}

fn noised_var(
    tape: &mut Tape,
    z0: Var,
    eps: &Tensor,
    l: usize,
    s: &NoiseSchedule,
) -> Result<Var> {
    let ab = s.alpha_bar(l)?;
    let scaled = tape.affine(z0, ab.sqrt(), 0.0)?;
    let noise = tape.constant(eps.shape().to_vec(), eps.values().iter().map(|v| v * (1.0 - ab).sqrt()).collect())?;
    tape.add(scaled, noise)
}

/// Starting point for a class embedding: null tokens plus small Gaussian jitter.
pub fn init_embedding(denoiser: &DenoiserModel, class_id: usize, n_tokens: usize, rng: &mut ChaCha8Rng) -> Result<SemanticEmbedding> {
    let c = denoiser.condition_dim();
    let jitter = Tensor::randn(&[n_tokens, c], 0.02, rng);
    let null = denoiser.null_embedding().values();
    let v = jitter
        .values()
        .iter()
        .enumerate()
        .map(|(i, j)| null[i % c] + j)
        .collect();
    SemanticEmbedding::new(class_id, Tensor::new(vec![n_tokens, c], v)?)
}

fn snapshot(editor: &Editor, classifier: &ClassifierModel) -> Vec<Vec<f64>> {
    editor
        .denoiser
        .named_params()
        .into_iter()
        .chain(editor.codec.named_params())
        .chain(classifier.named_params())
        .map(|(_, t)| t.values().to_vec())
        .collect()
}

/// Scalars of the embedding objective recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub edit: Var,
    pub rec: Var,
    /// `edit + gamma * rec`.
    pub total: Var,
}

/// Records the training objective for a batch `x` noised with `eps`: for each
/// class `a` (one token variable per class), the classifier's MSE to class `a`
/// on the decoded one-step estimate, plus `gamma` times the latent
/// reconstruction MSE, both averaged over classes.
pub fn record_objective(
    tape: &mut Tape,
    editor: &Editor,
    classifier: &ClassifierModel,
    x: &Tensor,
    eps: &Tensor,
    tok_vars: &[Var],
    cfg: &EditConfig,
) -> Result<Objective> {
    let k = tok_vars.len();
    if k == 0 {
        return Err(Error::InvalidArgument("objective needs at least one embedding".into()));
    }
    let s = editor.schedule;
    let l = cfg.depth(s);
    let batch = x.rows();
    let n_cls = classifier.classes();
    let dv = editor.denoiser.bind(tape, false);
    let cv = editor.codec.bind(tape);
    let clv = classifier.bind(tape, false);
    let xv = tape.leaf(x);
    let z0 = editor.codec.encode_var(tape, cv.as_ref(), xv)?;
    let z_l = noised_var(tape, z0, eps, l, s)?;
    let uncond = editor.denoiser.eval_var(tape, &dv, z_l, l, None)?;

    let mut edit_terms = Vec::with_capacity(k);
    let mut rec_terms = Vec::with_capacity(k);
    for (a, &ev) in tok_vars.iter().enumerate() {
        let cond = editor.denoiser.eval_var(tape, &dv, z_l, l, Some(ev))?;
        let guided = cfg_combine_var(tape, uncond, cond, cfg.lambda)?;
        let z_hat = predict_x0_var(tape, z_l, guided, l, s)?;
        let x_hat = editor.codec.decode_var(tape, cv.as_ref(), z_hat)?;
        let logits = classifier.logits_var(tape, &clv, x_hat)?;
        let target = tape.constant(vec![batch, n_cls], one_hot(&vec![a; batch], n_cls))?;
        edit_terms.push(tape.mse(logits, target)?);
        rec_terms.push(tape.mse(z_hat, z0)?);
    }
    let edit_sum = sum_vars(tape, &edit_terms)?;
    let rec_sum = sum_vars(tape, &rec_terms)?;
    let edit = tape.affine(edit_sum, 1.0 / k as f64, 0.0)?;
    let rec = tape.affine(rec_sum, 1.0 / k as f64, 0.0)?;
    let weighted = tape.affine(rec, cfg.gamma, 0.0)?;
    let total = tape.add(edit, weighted)?;
    Ok(Objective { edit, rec, total })
}

/// Optimizes one embedding per classifier class so that one-step edits of
/// every training image land in that class, with all model parameters frozen.
pub fn learn_embeddings(
    data: &Tensor,
    editor: &Editor,
    classifier: &ClassifierModel,
    cfg: &EditConfig,
    iters: usize,
    batch: usize,
    heldout: Option<(&Tensor, &[usize])>,
) -> Result<(Vec<SemanticEmbedding>, EmbeddingTrainReport)> {
    cfg.validate()?;
    let n = data.rows();
    if n == 0 {
        return Err(Error::EmptyData);
    }
    if batch == 0 || batch > n {
        return Err(Error::InvalidArgument(format!("batch {batch} must lie in 1..={n}")));
    }
    let start = Instant::now();
    let before = snapshot(editor, classifier);
    let k = classifier.classes();
    let d = editor.codec.latent_dim();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut embs = (0..k)
        .map(|a| init_embedding(editor.denoiser, a, cfg.n_tokens, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    for e in &mut embs {
        e.tokens.set_requires_grad(true);
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        ..AdamWConfig::default()
    });
    let mut report = EmbeddingTrainReport {
        gamma: cfg.gamma,
        ..Default::default()
    };

    for it in 0..iters {
        let idx = sample(&mut rng, n, batch).into_vec();
        let x = data.select_rows(&idx);
        let eps = Tensor::randn(&[batch, d], 1.0, &mut rng);

        let mut tape = Tape::new();
        let tok_vars: Vec<_> = embs.iter().map(|e| tape.variable(&e.tokens)).collect();
        let obj = record_objective(&mut tape, editor, classifier, &x, &eps, &tok_vars, cfg)?;
        let (edit, rec, total) = (obj.edit, obj.rec, obj.total);

        let (ev, rv) = (tape.scalar(edit), tape.scalar(rec));
        let tv = ev + cfg.gamma * rv;
        if !tv.is_finite() {
            return Err(Error::Diverged {
                stage: "iteration",
                index: it,
            });
        }
        report.edit_loss.push(ev);
        report.rec_loss.push(rv);
        report.combined_loss.push(tv);

        tape.backward(total)?;
        for (e, &v) in embs.iter_mut().zip(&tok_vars) {
            e.tokens.zero_grad();
            tape.accumulate_into(v, &mut e.tokens)?;
        }
        let mut params: Vec<&mut Tensor> = embs.iter_mut().map(|e| &mut e.tokens).collect();
        opt.step(&mut params)?;
    }

    if snapshot(editor, classifier) != before {
        return Err(Error::FrozenViolation("model parameters changed during embedding training".into()));
    }
    for e in &mut embs {
        e.tokens.clear_grad();
        e.tokens.set_requires_grad(false);
    }
    if let Some((hx, hl)) = heldout {
        report.heldout_success = Some(edit_success(editor, classifier, &embs, hx, hl, cfg)?);
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((embs, report))
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Edits every image toward each class it does not already belong to and
/// returns the fraction classified as the target.
pub fn edit_success(
    editor: &Editor,
    classifier: &ClassifierModel,
    embs: &[SemanticEmbedding],
    x: &Tensor,
    labels: &[usize],
    cfg: &EditConfig,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (a, e) in embs.iter().enumerate() {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != a).collect();
        if idx.is_empty() {
            continue;
        }
        let edited = editor.edit(&x.select_rows(&idx), e, cfg)?;
        hits += classifier.predict(&edited)?.iter().filter(|&&p| p == a).count();
        total += idx.len();
    }
    Ok(hits as f64 / total.max(1) as f64)
}
