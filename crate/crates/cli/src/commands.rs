//! The six run commands. Every command reads and writes fixed locations under
//! the run directory, so later commands find earlier outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use semedit::autodiff::container::save_params;
use semedit::autodiff::Tensor;
use semedit::collapse::{collapse_report, generated_alignment, jensen_gap_bound, JensenConfig};
use semedit::diffusion::NoiseSchedule;
use semedit::error::Error;
use semedit::io::{
    fingerprint_file, image_grid, load_embeddings, load_shapes_dir, save_embeddings, save_shapes_dir, write_pgm,
    EmbeddingManifest, StoredDataset, IMAGES_FILE, LABELS_FILE, META_FILE,
};
use semedit::models::persist::{
    load_classifier, load_codec, load_denoiser, save_classifier, save_codec, save_denoiser, ModelManifest,
};
use semedit::models::{train_classifier, train_denoiser, ClassifierModel, Codec, DenoiserModel};
use semedit::semantic::{learn_embeddings, EditConfig, Editor, SemanticEmbedding};
use semedit::synthdata::{gen_shapes, split_indices, Attribute, ShapesDataset, PIXELS, SIDE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{EditMode, RunConfig};
use crate::manifest::Recorder;

/// Where each artifact lives inside a run directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout { root: root.to_path_buf() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn denoiser(&self) -> PathBuf {
        self.root.join("models/denoiser.bin")
    }

    pub fn codec(&self) -> PathBuf {
        self.root.join("models/codec.bin")
    }

    pub fn classifier(&self, a: Attribute) -> PathBuf {
        self.root.join(format!("models/classifier_{}.bin", a.name()))
    }

    pub fn embeddings(&self, a: Attribute) -> PathBuf {
        self.root.join(format!("embeddings/{}.bin", a.name()))
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join(format!("metrics/{name}.csv"))
    }

    pub fn edit(&self, file: &str) -> PathBuf {
        self.root.join("edit").join(file)
    }

    pub fn diagnose(&self, file: &str) -> PathBuf {
        self.root.join("diagnose").join(file)
    }
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()).into());
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, toml::to_string(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_grid(path: &Path, images: &Tensor, cols: usize) -> Result<()> {
    ensure_parent(path)?;
    let (w, h, px) = image_grid(images, SIDE, cols.max(1))?;
    write_pgm(path, &px, w, h)?;
    Ok(())
}

fn check_fingerprint(artifact: &Path, what: &str, recorded: &str, found: &str) -> Result<()> {
    if recorded != found {
        return Err(Error::FingerprintMismatch {
            path: artifact.display().to_string(),
            recorded: format!("{what} {recorded}"),
            found: found.to_string(),
        }
        .into());
    }
    Ok(())
}

fn load_data(layout: &Layout, rec: &mut Recorder) -> Result<StoredDataset> {
    let dir = layout.data();
    let stored = load_shapes_dir(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    for f in [META_FILE, IMAGES_FILE, LABELS_FILE] {
        rec.input(&dir.join(f))?;
    }
    Ok(stored)
}

/// Loads a model artifact and refuses it if it was trained on other data.
fn checked<M>(
    path: &Path,
    data: &StoredDataset,
    rec: &mut Recorder,
    load: impl Fn(&Path) -> semedit::error::Result<(M, ModelManifest)>,
) -> Result<(M, ModelManifest)> {
    require(path)?;
    let (model, manifest) = load(path).with_context(|| format!("loading {}", path.display()))?;
    check_fingerprint(path, "dataset", &manifest.dataset_fingerprint, &data.meta.fingerprint)?;
    rec.input(path)?;
    Ok((model, manifest))
}

struct Generator {
    denoiser: DenoiserModel,
    codec: Codec,
    schedule: NoiseSchedule,
}

impl Generator {
    fn load(layout: &Layout, data: &StoredDataset, rec: &mut Recorder) -> Result<Generator> {
        let (denoiser, manifest) = checked(&layout.denoiser(), data, rec, load_denoiser)?;
        let (codec, _) = checked(&layout.codec(), data, rec, load_codec)?;
        let schedule = manifest
            .schedule
            .ok_or_else(|| anyhow!("{} records no noise schedule", layout.denoiser().display()))?
            .build()?;
        Ok(Generator {
            denoiser,
            codec,
            schedule,
        })
    }

    fn editor(&self) -> Editor<'_> {
        Editor::new(&self.denoiser, &self.codec, &self.schedule)
    }
}

/// Loads learned embeddings and refuses them if the denoiser or classifier
/// files changed since they were learned.
fn load_checked_embeddings(layout: &Layout, a: Attribute, rec: &mut Recorder) -> Result<(Vec<SemanticEmbedding>, EmbeddingManifest)> {
    let path = layout.embeddings(a);
    require(&path)?;
    let (embs, manifest) = load_embeddings(&path)?;
    check_fingerprint(&path, "denoiser", &manifest.denoiser_fingerprint, &fingerprint_file(&layout.denoiser())?)?;
    check_fingerprint(
        &path,
        "classifier",
        &manifest.classifier_fingerprint,
        &fingerprint_file(&layout.classifier(a))?,
    )?;
    rec.input(&path)?;
    Ok((embs, manifest))
}

fn first_rows(x: &Tensor, n: usize) -> Tensor {
    x.select_rows(&(0..n.min(x.rows())).collect::<Vec<_>>())
}

pub fn gen_data(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let mut rec = Recorder::new("gen-data", &layout.root);
    let ds = gen_shapes(cfg.data.n, cfg.seed)?;
    let strata: Vec<usize> = (0..ds.len()).map(|i| ds.combo(i)).collect();
    let (train, _) = split_indices(&strata, cfg.data.train_frac, cfg.seed.wrapping_add(1))?;
    let mut is_train = vec![false; ds.len()];
    for i in train {
        is_train[i] = true;
    }
    let dir = layout.data();
    let meta = save_shapes_dir(&dir, &ds, &is_train, cfg.data.train_frac, cfg.seed.wrapping_add(1))?;
    write_grid(&dir.join("overview.pgm"), &first_rows(&ds.images, 64), 16)?;
    for f in [IMAGES_FILE, LABELS_FILE, "overview.pgm", META_FILE] {
        rec.output(&dir.join(f))?;
    }
    let n_train = is_train.iter().filter(|&&t| t).count();
    rec.metric("n_train", n_train as f64);
    rec.metric("n_heldout", (meta.n - n_train) as f64);
    rec.finish(cfg)?;
    Ok(())
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
}

pub fn train_denoiser_cmd(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let mut rec = Recorder::new("train-denoiser", &layout.root);
    let data = load_data(layout, &mut rec)?;
    let train = data.train();
    let labels: Vec<Vec<usize>> = (0..train.len()).map(|i| vec![train.shape[i], train.stripe[i]]).collect();
    let d = &cfg.denoiser;
    let schedule = NoiseSchedule::new(d.t_max, d.beta_min, d.beta_max)?;
    let model = DenoiserModel::new(d.architecture(), cfg.seed);
    let (model, losses) = train_denoiser(model, &train.images, &labels, &schedule, &d.train(cfg.seed))?;

    let (den_path, codec_path) = (layout.denoiser(), layout.codec());
    ensure_parent(&den_path)?;
    save_denoiser(&den_path, &model, cfg.seed, &schedule, &data.meta.fingerprint)?;
    save_codec(&codec_path, &Codec::Identity { dim: PIXELS }, cfg.seed, &data.meta.fingerprint)?;
    let csv = layout.metrics("denoiser_loss");
    let rows: Vec<LossRow> = losses.iter().enumerate().map(|(epoch, &loss)| LossRow { epoch, loss }).collect();
    write_csv(&csv, &rows)?;
    for p in [&den_path, &codec_path, &csv] {
        rec.output(p)?;
    }
    rec.metric("final_loss", losses.last().copied().unwrap_or(f64::NAN));
    rec.finish(cfg)?;
    Ok(())
}

#[derive(Serialize)]
struct AccuracyRow {
    epoch: usize,
    loss: f64,
    train_accuracy: f64,
}

pub fn train_classifier_cmd(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let mut rec = Recorder::new("train-classifier", &layout.root);
    let data = load_data(layout, &mut rec)?;
    let (train, heldout) = (data.train(), data.heldout());
    for &a in &cfg.classifier.attributes {
        let (model, report) = train_classifier(&train.images, train.labels(a), &cfg.classifier.get(a).train(cfg.seed))?;
        let path = layout.classifier(a);
        ensure_parent(&path)?;
        save_classifier(&path, &model, cfg.seed, &data.meta.fingerprint)?;
        let csv = layout.metrics(&format!("classifier_{}", a.name()));
        let rows: Vec<AccuracyRow> = report
            .loss
            .iter()
            .zip(&report.accuracy)
            .enumerate()
            .map(|(epoch, (&loss, &train_accuracy))| AccuracyRow {
                epoch,
                loss,
                train_accuracy,
            })
            .collect();
        write_csv(&csv, &rows)?;
        rec.output(&path)?;
        rec.output(&csv)?;
        rec.metric(format!("{}.train_accuracy", a.name()), report.accuracy.last().copied().unwrap_or(f64::NAN));
        if !heldout.is_empty() {
            rec.metric(
                format!("{}.heldout_accuracy", a.name()),
                model.accuracy(&heldout.images, heldout.labels(a))?,
            );
        }
    }
    rec.finish(cfg)?;
    Ok(())
}

#[derive(Serialize)]
struct EmbeddingRow {
    iter: usize,
    edit_loss: f64,
    rec_loss: f64,
    combined_loss: f64,
}

pub fn learn_embedding(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let mut rec = Recorder::new("learn-embedding", &layout.root);
    let data = load_data(layout, &mut rec)?;
    let gen = Generator::load(layout, &data, &mut rec)?;
    let (train, heldout) = (data.train(), data.heldout());
    let e = &cfg.embedding;
    let ecfg = e.guidance.edit_config(cfg.seed);
    let budget = first_rows(&train.images, e.train_images);
    let n_eval = e.eval_images.min(heldout.len());
    let eval_x = first_rows(&heldout.images, n_eval);
    for &a in &e.attributes {
        let (classifier, _) = checked(&layout.classifier(a), &data, &mut rec, load_classifier)?;
        let eval = (n_eval > 0).then(|| (&eval_x, &heldout.labels(a)[..n_eval]));
        let (embs, report) = learn_embeddings(&budget, &gen.editor(), &classifier, &ecfg, e.iters, e.batch.min(budget.rows()), eval)?;

        let path = layout.embeddings(a);
        ensure_parent(&path)?;
        let manifest = EmbeddingManifest {
            attribute: a,
            class_ids: embs.iter().map(|e| e.class_ids.clone()).collect(),
            edit: ecfg.clone(),
            iters: e.iters,
            denoiser_fingerprint: fingerprint_file(&layout.denoiser())?,
            classifier_fingerprint: fingerprint_file(&layout.classifier(a))?,
        };
        save_embeddings(&path, &embs, &manifest)?;
        let report_path = layout.root.join(format!("embeddings/{}_report.toml", a.name()));
        write_toml(&report_path, &report)?;
        let csv = layout.metrics(&format!("embedding_{}", a.name()));
        let rows: Vec<EmbeddingRow> = (0..report.combined_loss.len())
            .map(|i| EmbeddingRow {
                iter: i,
                edit_loss: report.edit_loss[i],
                rec_loss: report.rec_loss[i],
                combined_loss: report.combined_loss[i],
            })
            .collect();
        write_csv(&csv, &rows)?;
        for p in [&path, &report_path, &csv] {
            rec.output(p)?;
        }
        if let Some(&l) = report.combined_loss.last() {
            rec.metric(format!("{}.final_loss", a.name()), l);
        }
        if let Some(s) = report.heldout_success {
            rec.metric(format!("{}.heldout_success", a.name()), s);
        }
    }
    rec.finish(cfg)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct VerdictRow {
    image: String,
    lambda: f64,
    attribute: String,
    source: String,
    target: String,
    predicted: String,
    verdict: &'static str,
    off_mask_mse: f64,
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("+")
}

/// Mean squared change over pixels outside every mask in `masks`.
fn off_mask_mse(before: &[f64], after: &[f64], masks: &[&[bool]]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for p in 0..before.len() {
        if masks.iter().all(|m| !m[p]) {
            sum += (before[p] - after[p]).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// One planned edit: source rows sharing a target, edited with fixed guidance.
struct Batch {
    rows: Vec<usize>,
    targets: Vec<usize>,
}

/// Groups images by the class tuple they are flipped to.
fn flip_batches(ds: &ShapesDataset, attrs: &[Attribute], n: usize) -> Vec<Batch> {
    let mut out: Vec<Batch> = vec![];
    for i in 0..n {
        let targets: Vec<usize> = attrs.iter().map(|&a| 1 - ds.labels(a)[i]).collect();
        match out.iter_mut().find(|b| b.targets == targets) {
            Some(b) => b.rows.push(i),
            None => out.push(Batch { rows: vec![i], targets }),
        }
    }
    out.sort_by(|a, b| a.targets.cmp(&b.targets));
    out
}

pub fn edit(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let mut rec = Recorder::new("edit", &layout.root);
    let data = load_data(layout, &mut rec)?;
    let gen = Generator::load(layout, &data, &mut rec)?;
    let editor = gen.editor();
    let heldout_idx: Vec<usize> = (0..data.data.len()).filter(|&i| !data.is_train[i]).collect();
    let heldout = data.heldout();
    let n = cfg.edit.n_images.min(heldout.len());
    if n == 0 {
        bail!("no held-out images to edit");
    }
    let ecfg = cfg.edit.guidance.edit_config(cfg.seed);
    let attrs = match cfg.edit.mode {
        EditMode::MultiAttribute => vec![Attribute::Shape, Attribute::Stripe],
        _ => vec![cfg.edit.attribute],
    };
    let mut classifiers: Vec<ClassifierModel> = vec![];
    let mut embeddings: Vec<Vec<SemanticEmbedding>> = vec![];
    for &a in &attrs {
        classifiers.push(checked(&layout.classifier(a), &data, &mut rec, load_classifier)?.0);
        embeddings.push(load_checked_embeddings(layout, a, &mut rec)?.0);
    }
    let lambdas = match cfg.edit.mode {
        EditMode::Interpolate => cfg.edit.lambdas.clone(),
        _ => vec![ecfg.lambda],
    };

    // edited[l][i]: image i edited at lambdas[l].
    let mut edited: Vec<Vec<Vec<f64>>> = vec![vec![vec![]; n]; lambdas.len()];
    for b in flip_batches(&heldout, &attrs, n) {
        let x = heldout.images.select_rows(&b.rows);
        let parts: Vec<&SemanticEmbedding> = embeddings.iter().zip(&b.targets).map(|(e, &t)| &e[t]).collect();
        let outs: Vec<Tensor> = match cfg.edit.mode {
            EditMode::Multi => vec![editor.edit(&x, parts[0], &ecfg)?],
            EditMode::Single => vec![editor.edit_single_step(&x, parts[0], &ecfg)?],
            EditMode::Interpolate => editor.interpolate_scale(&x, parts[0], &lambdas, &ecfg)?,
            EditMode::MultiAttribute => vec![editor.edit_multi(&x, &parts, &ecfg)?],
        };
        for (l, out) in outs.iter().enumerate() {
            for (k, &i) in b.rows.iter().enumerate() {
                edited[l][i] = out.row(k).to_vec();
            }
        }
    }

    let attr_name = attrs.iter().map(|a| a.name()).collect::<Vec<_>>().join("+");
    let mut rows = vec![];
    let mut all = vec![];
    for (l, &lambda) in lambdas.iter().enumerate() {
        let out = Tensor::new(vec![n, PIXELS], edited[l].concat())?;
        let preds: Vec<Vec<usize>> = classifiers.iter().map(|c| c.predict(&out)).collect::<semedit::error::Result<_>>()?;
        let (mut hits, mut mse) = (0usize, 0.0);
        for i in 0..n {
            let source: Vec<usize> = attrs.iter().map(|&a| heldout.labels(a)[i]).collect();
            let target: Vec<usize> = source.iter().map(|s| 1 - s).collect();
            let predicted: Vec<usize> = preds.iter().map(|p| p[i]).collect();
            let masks: Vec<&[bool]> = attrs.iter().map(|&a| heldout.mask(a, i)).collect();
            let err = off_mask_mse(heldout.images.row(i), out.row(i), &masks);
            let verdict = if lambda == 0.0 {
                "reconstruction"
            } else if predicted == target {
                hits += 1;
                "success"
            } else {
                "failure"
            };
            mse += err;
            rows.push(VerdictRow {
                image: format!("img_{:05}.pgm", heldout_idx[i]),
                lambda,
                attribute: attr_name.clone(),
                source: join_ids(&source),
                target: join_ids(&target),
                predicted: join_ids(&predicted),
                verdict,
                off_mask_mse: err,
            });
        }
        let key = |m: &str| match cfg.edit.mode {
            EditMode::Interpolate => format!("{m}@lambda={lambda}"),
            _ => m.to_string(),
        };
        if lambda != 0.0 {
            rec.metric(key("success_rate"), hits as f64 / n as f64);
        }
        rec.metric(key("off_mask_mse"), mse / n as f64);
        all.extend_from_slice(out.values());
    }

    let all = Tensor::new(vec![n * lambdas.len(), PIXELS], all)?;
    let (verdicts, bin, grid, sources) = (
        layout.edit("verdicts.csv"),
        layout.edit("edited.bin"),
        layout.edit("grid.pgm"),
        layout.edit("sources.pgm"),
    );
    write_csv(&verdicts, &rows)?;
    save_params(&bin, &[("edited".to_string(), &all)])?;
    let cols = if cfg.edit.mode == EditMode::Interpolate { n } else { cfg.edit.grid_cols };
    write_grid(&grid, &all, cols)?;
    write_grid(&sources, &first_rows(&heldout.images, n), cols)?;
    for p in [&verdicts, &bin, &grid, &sources] {
        rec.output(p)?;
    }
    rec.finish(cfg)?;
    Ok(())
}

#[derive(Serialize)]
struct JensenRow {
    l: usize,
    l_frac: f64,
    sigma2: f64,
    d: usize,
    grad_norm_max: f64,
    q_mc: f64,
    bound: f64,
    n_samples: usize,
}

pub fn diagnose(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let mut rec = Recorder::new("diagnose", &layout.root);
    let data = load_data(layout, &mut rec)?;
    let gen = Generator::load(layout, &data, &mut rec)?;
    let dg = &cfg.diagnose;
    let a = dg.attribute;
    let (classifier, _) = checked(&layout.classifier(a), &data, &mut rec, load_classifier)?;
    let (train, heldout) = (data.train(), data.heldout());

    let report = collapse_report(&classifier, &train.images, train.labels(a))?;
    let collapse_path = layout.diagnose("collapse.toml");
    write_toml(&collapse_path, &report)?;
    rec.output(&collapse_path)?;
    rec.metric("collapse_ratio", report.collapse_ratio);
    rec.metric("beta_residual", report.beta_residual);
    rec.metric("min_head_mean_cosine", report.wa_mu_cos.iter().copied().fold(f64::INFINITY, f64::min));

    let n = dg.n_images.min(heldout.len());
    let x = first_rows(&heldout.images, n);
    if layout.embeddings(a).exists() {
        let (embs, manifest) = load_checked_embeddings(layout, a, &mut rec)?;
        let ecfg = EditConfig {
            seed: cfg.seed,
            ..manifest.edit
        };
        let sources = vec![x.clone(); classifier.classes()];
        let editor = gen.editor();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let aligned = generated_alignment(&classifier, &sources, |c, src| {
            if dg.multi_step_alignment {
                editor.edit(src, &embs[c], &ecfg)
            } else {
                let eps = Tensor::randn(src.shape(), 1.0, &mut rng);
                editor.one_step(src, &embs[c], &eps, &ecfg)
            }
        })?;
        let path = layout.diagnose("generated_alignment.toml");
        write_toml(&path, &aligned)?;
        rec.output(&path)?;
        rec.metric("generated_beta_residual", aligned.beta_residual);
        rec.metric("min_generated_cosine", aligned.cosines.iter().copied().fold(f64::INFINITY, f64::min));
    }

    let mut rows = vec![];
    for &l_frac in &dg.l_fracs {
        let l = gen.schedule.frac_to_t(l_frac).max(1);
        for &sigma2 in &dg.sigma2s {
            let jc = JensenConfig {
                l,
                sigma2,
                n_probe: dg.n_probe,
                n_noise: dg.n_noise,
                target: dg.target,
                seed: cfg.seed,
            };
            let est = jensen_gap_bound(&classifier, &gen.codec, &gen.denoiser, &gen.schedule, &x, None, &jc)?;
            rec.metric(format!("bound@l={l},sigma2={sigma2}"), est.bound);
            rows.push(JensenRow {
                l,
                l_frac,
                sigma2,
                d: est.d,
                grad_norm_max: est.grad_norm_max,
                q_mc: est.q_mc,
                bound: est.bound,
                n_samples: est.n_samples,
            });
        }
    }
    let jensen = layout.diagnose("jensen.csv");
    write_csv(&jensen, &rows)?;
    rec.output(&jensen)?;
    rec.finish(cfg)?;
    Ok(())
}
