//! Portable graymaps, on-disk datasets and content fingerprints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::container::{load_params, save_params};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::persist::{load_artifact, save_artifact};
use crate::semantic::{EditConfig, SemanticEmbedding};
use crate::synthdata::Attribute;
use crate::synthdata::{mask_from_rle, mask_rle, Nuisance, ShapesDataset, PIXELS, SIDE};

pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.csv";
pub const META_FILE: &str = "dataset.toml";

/// Lowercase hex SHA-256.
pub fn fingerprint(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn fingerprint_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    Ok(fingerprint(&fs::read(path)?))
}

/// Binary (P5) graymap with values in `[0, 1]` quantized to 8 bits.
pub fn write_pgm(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::InvalidShape {
            shape: vec![height, width],
            len: values.len(),
        });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let bad = || Error::Format(format!("{} is not a binary graymap", path.display()));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad())?.to_string());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    if fields[0] != "P5" || num(&fields[3])? != 255 {
        return Err(bad());
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let data = bytes.get(i + 1..i + 1 + w * h).ok_or_else(bad)?;
    Ok((w, h, data.iter().map(|&b| b as f64 / 255.0).collect()))
}

/// Tiles square images (rows of `images`, side `side`) `cols` per row with
/// a one-pixel mid-gray gutter. Returns `(width, height, pixels)`.
pub fn image_grid(images: &Tensor, side: usize, cols: usize) -> Result<(usize, usize, Vec<f64>)> {
    let n = images.rows();
    if cols == 0 || images.numel() != n * side * side {
        return Err(Error::InvalidArgument("grid needs cols >= 1 and square images".into()));
    }
    let rows = n.div_ceil(cols).max(1);
    let (w, h) = (cols * (side + 1) - 1, rows * (side + 1) - 1);
    let mut px = vec![0.5; w * h];
    for k in 0..n {
        let (gr, gc) = (k / cols, k % cols);
        for y in 0..side {
            for x in 0..side {
                px[(gr * (side + 1) + y) * w + gc * (side + 1) + x] = images.row(k)[y * side + x];
            }
        }
    }
    Ok((w, h, px))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub seed: u64,
    pub train_frac: f64,
    pub split_seed: u64,
    /// Fingerprint of the image container followed by the label table.
    pub fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    file: String,
    split: String,
    shape: usize,
    stripe: usize,
    stripe_mask: String,
    shape_mask: String,
    center_x: f64,
    center_y: f64,
    size: f64,
    background: f64,
    foreground: f64,
    stripe_level: f64,
}

/// A dataset read back from disk with its train/held-out assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredDataset {
    pub data: ShapesDataset,
    pub is_train: Vec<bool>,
    pub meta: DatasetMeta,
}

impl StoredDataset {
    pub fn train(&self) -> ShapesDataset {
        self.data.subset(&(0..self.data.len()).filter(|&i| self.is_train[i]).collect::<Vec<_>>())
    }

    pub fn heldout(&self) -> ShapesDataset {
        self.data.subset(&(0..self.data.len()).filter(|&i| !self.is_train[i]).collect::<Vec<_>>())
    }
}

fn dataset_fingerprint(dir: &Path) -> Result<String> {
    let mut bytes = fs::read(dir.join(IMAGES_FILE))?;
    bytes.extend(fs::read(dir.join(LABELS_FILE))?);
    Ok(fingerprint(&bytes))
}

/// Writes one graymap per image, the exact image container, the label table
/// and `dataset.toml`. Returns the metadata.
pub fn save_shapes_dir(
    dir: &Path,
    ds: &ShapesDataset,
    is_train: &[bool],
    train_frac: f64,
    split_seed: u64,
) -> Result<DatasetMeta> {
    if is_train.len() != ds.len() {
        return Err(Error::InvalidArgument("split flags must cover every image".into()));
    }
    fs::create_dir_all(dir)?;
    save_params(&dir.join(IMAGES_FILE), &[("images".to_string(), &ds.images)])?;
    let mut w = csv::Writer::from_path(dir.join(LABELS_FILE)).map_err(|e| Error::Format(e.to_string()))?;
    for i in 0..ds.len() {
        let file = format!("img_{i:05}.pgm");
        write_pgm(&dir.join(&file), ds.images.row(i), SIDE, SIDE)?;
        let nz = &ds.nuisance[i];
        w.serialize(LabelRow {
            file,
            split: if is_train[i] { "train" } else { "heldout" }.into(),
            shape: ds.shape[i],
            stripe: ds.stripe[i],
            stripe_mask: mask_rle(&ds.stripe_mask[i]),
            shape_mask: mask_rle(&ds.shape_mask[i]),
            center_x: nz.center.0,
            center_y: nz.center.1,
            size: nz.size,
            background: nz.background,
            foreground: nz.foreground,
            stripe_level: nz.stripe_level,
        })
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    drop(w);
    let meta = DatasetMeta {
        n: ds.len(),
        seed: ds.seed,
        train_frac,
        split_seed,
        fingerprint: dataset_fingerprint(dir)?,
    };
    fs::write(
        dir.join(META_FILE),
        toml::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    Ok(meta)
}

/// Reads a dataset directory, refusing it if its content no longer matches
/// the recorded fingerprint.
pub fn load_shapes_dir(dir: &Path) -> Result<StoredDataset> {
    for f in [IMAGES_FILE, LABELS_FILE, META_FILE] {
        if !dir.join(f).exists() {
            return Err(Error::MissingArtifact(dir.join(f).display().to_string()));
        }
    }
    let meta: DatasetMeta =
        toml::from_str(&fs::read_to_string(dir.join(META_FILE))?).map_err(|e| Error::Format(e.to_string()))?;
    let found = dataset_fingerprint(dir)?;
    if found != meta.fingerprint {
        return Err(Error::FingerprintMismatch {
            path: dir.display().to_string(),
            recorded: meta.fingerprint,
            found,
        });
    }
    let images = load_params(&dir.join(IMAGES_FILE))?
        .into_iter()
        .next()
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format("empty image container".into()))?;
    let mut data = ShapesDataset {
        images,
        shape: vec![],
        stripe: vec![],
        stripe_mask: vec![],
        shape_mask: vec![],
        nuisance: vec![],
        seed: meta.seed,
    };
    let mut is_train = vec![];
    let mut r = csv::Reader::from_path(dir.join(LABELS_FILE)).map_err(|e| Error::Format(e.to_string()))?;
    for row in r.deserialize::<LabelRow>() {
        let row = row.map_err(|e| Error::Format(e.to_string()))?;
        is_train.push(row.split == "train");
        data.shape.push(row.shape);
        data.stripe.push(row.stripe);
        data.stripe_mask.push(mask_from_rle(&row.stripe_mask, PIXELS)?);
        data.shape_mask.push(mask_from_rle(&row.shape_mask, PIXELS)?);
        data.nuisance.push(Nuisance {
            center: (row.center_x, row.center_y),
            size: row.size,
            background: row.background,
            foreground: row.foreground,
            stripe_level: row.stripe_level,
        });
    }
    if data.images.rows() != data.shape.len() || data.shape.len() != meta.n {
        return Err(Error::Format(format!(
            "{} images, {} label rows, {} recorded",
            data.images.rows(),
            data.shape.len(),
            meta.n
        )));
    }
    Ok(StoredDataset { data, is_train, meta })
}

/// Sidecar of a learned embedding set: which classifier and denoiser it was
/// optimized against, identified by file fingerprint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub attribute: Attribute,
    pub class_ids: Vec<Vec<usize>>,
    pub edit: EditConfig,
    pub iters: usize,
    pub denoiser_fingerprint: String,
    pub classifier_fingerprint: String,
}

pub fn save_embeddings(path: &Path, embs: &[SemanticEmbedding], manifest: &EmbeddingManifest) -> Result<()> {
    let params: Vec<(String, &Tensor)> = embs.iter().enumerate().map(|(i, e)| (format!("embedding.{i}"), &e.tokens)).collect();
    save_artifact(path, &params, manifest)
}

pub fn load_embeddings(path: &Path) -> Result<(Vec<SemanticEmbedding>, EmbeddingManifest)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let (params, manifest): (_, EmbeddingManifest) = load_artifact(path)?;
    if params.len() != manifest.class_ids.len() {
        return Err(Error::Format(format!(
            "{} holds {} embeddings but lists {} class ids",
            path.display(),
            params.len(),
            manifest.class_ids.len()
        )));
    }
    let embs = params
        .into_iter()
        .zip(&manifest.class_ids)
        .map(|((_, tokens), ids)| {
            let mut e = SemanticEmbedding::new(ids[0], tokens)?;
            e.class_ids = ids.clone();
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((embs, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_shapes, split_indices};

    #[test]
    fn pgm_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&p, &[0.0, 0.5, 1.0, 2.0, -1.0, 0.25], 3, 2).unwrap();
        let (w, h, v) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (3, 2));
        let bytes: Vec<u8> = v.iter().map(|x| (x * 255.0).round() as u8).collect();
        assert_eq!(bytes, vec![0, 128, 255, 255, 0, 64]);
        assert!(write_pgm(&p, &[0.0; 5], 3, 2).is_err());
    }

    #[test]
    fn embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        let embs = vec![
            SemanticEmbedding::new(0, Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1e-9, 5.0, -7.25]).unwrap()).unwrap(),
            SemanticEmbedding::new(1, Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap()).unwrap(),
        ];
        let m = EmbeddingManifest {
            attribute: Attribute::Stripe,
            class_ids: vec![vec![0], vec![1]],
            edit: EditConfig::default(),
            iters: 3,
            denoiser_fingerprint: "d".into(),
            classifier_fingerprint: "c".into(),
        };
        save_embeddings(&p, &embs, &m).unwrap();
        assert_eq!(load_embeddings(&p).unwrap(), (embs, m));
        assert!(matches!(load_embeddings(&dir.path().join("none.bin")), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn grid_layout() {
        let t = Tensor::new(vec![3, 4], vec![1.0; 12]).unwrap();
        let (w, h, px) = image_grid(&t, 2, 2).unwrap();
        assert_eq!((w, h), (5, 5));
        assert_eq!(px[2], 0.5);
        assert_eq!(px[3 * 5 + 3], 0.5);
        assert_eq!(px[3 * 5], 1.0);
    }

    #[test]
    fn dataset_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_shapes(16, 4).unwrap();
        let strata: Vec<usize> = (0..16).map(|i| ds.combo(i)).collect();
        let (tr, _) = split_indices(&strata, 0.5, 1).unwrap();
        let flags: Vec<bool> = (0..16).map(|i| tr.contains(&i)).collect();
        let meta = save_shapes_dir(dir.path(), &ds, &flags, 0.5, 1).unwrap();
        let back = load_shapes_dir(dir.path()).unwrap();
        assert_eq!(back.data, ds);
        assert_eq!(back.is_train, flags);
        assert_eq!(back.meta, meta);
        assert_eq!(back.train().len(), 8);
        assert!(dir.path().join("img_00015.pgm").exists());

        let again = tempfile::tempdir().unwrap();
        assert_eq!(save_shapes_dir(again.path(), &ds, &flags, 0.5, 1).unwrap().fingerprint, meta.fingerprint);

        let labels = dir.path().join(LABELS_FILE);
        let text = fs::read_to_string(&labels).unwrap().replacen("heldout", "train", 1);
        fs::write(&labels, text).unwrap();
        assert!(matches!(load_shapes_dir(dir.path()), Err(Error::FingerprintMismatch { .. })));
        fs::remove_file(dir.path().join(IMAGES_FILE)).unwrap();
        assert!(matches!(load_shapes_dir(dir.path()), Err(Error::MissingArtifact(_))));
    }
}
