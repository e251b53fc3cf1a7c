//! Model artifacts: a parameter container plus a TOML sidecar manifest.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{ClassifierConfig, ClassifierModel, Codec, DenoiserConfig, DenoiserModel, LearnedCodec};
use crate::autodiff::container::{load_params, save_params};
use crate::autodiff::Tensor;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl From<&NoiseSchedule> for ScheduleSpec {
    fn from(s: &NoiseSchedule) -> Self {
        ScheduleSpec {
            t_max: s.t_max,
            beta_min: s.beta_min,
            beta_max: s.beta_max,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.t_max, self.beta_min, self.beta_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Denoiser(DenoiserConfig),
    Classifier(ClassifierConfig),
    IdentityCodec { dim: usize },
    LearnedCodec { data_dim: usize, hidden: usize, latent_dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub architecture: Architecture,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub schedule: Option<ScheduleSpec>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

/// Writes `path` (parameter container) and `path.toml` (manifest).
pub fn save_artifact<M: Serialize>(path: &Path, params: &[(String, &Tensor)], manifest: &M) -> Result<()> {
    save_params(path, params)?;
    let text = toml::to_string(manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

pub fn load_artifact<M: DeserializeOwned>(path: &Path) -> Result<(Vec<(String, Tensor)>, M)> {
    let params = load_params(path)?;
    let text = std::fs::read_to_string(sidecar_path(path))?;
    let manifest = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    Ok((params, manifest))
}

pub fn save_denoiser(
    path: &Path,
    model: &DenoiserModel,
    seed: u64,
    schedule: &NoiseSchedule,
    dataset_fingerprint: &str,
) -> Result<()> {
    let manifest = ModelManifest {
        architecture: Architecture::Denoiser(model.config.clone()),
        seed,
        dataset_fingerprint: dataset_fingerprint.to_string(),
        schedule: Some(schedule.into()),
    };
    save_artifact(path, &model.named_params(), &manifest)
}

pub fn load_denoiser(path: &Path) -> Result<(DenoiserModel, ModelManifest)> {
    let (params, manifest): (_, ModelManifest) = load_artifact(path)?;
    let Architecture::Denoiser(cfg) = &manifest.architecture else {
        return Err(Error::Format(format!("{} is not a denoiser", path.display())));
    };
    let mut model = DenoiserModel::new(cfg.clone(), 0);
    model.load_params(params)?;
    Ok((model, manifest))
}

pub fn save_classifier(path: &Path, model: &ClassifierModel, seed: u64, dataset_fingerprint: &str) -> Result<()> {
    let manifest = ModelManifest {
        architecture: Architecture::Classifier(model.config.clone()),
        seed,
        dataset_fingerprint: dataset_fingerprint.to_string(),
        schedule: None,
    };
    save_artifact(path, &model.named_params(), &manifest)
}

pub fn load_classifier(path: &Path) -> Result<(ClassifierModel, ModelManifest)> {
    let (params, manifest): (_, ModelManifest) = load_artifact(path)?;
    let Architecture::Classifier(cfg) = &manifest.architecture else {
        return Err(Error::Format(format!("{} is not a classifier", path.display())));
    };
    let mut model = ClassifierModel::new(cfg.clone(), 0);
    model.load_params(params)?;
    Ok((model, manifest))
}

pub fn save_codec(path: &Path, codec: &Codec, seed: u64, dataset_fingerprint: &str) -> Result<()> {
    let architecture = match codec {
        Codec::Identity { dim } => Architecture::IdentityCodec { dim: *dim },
        Codec::Learned(_) => {
            let params = codec.named_params();
            Architecture::LearnedCodec {
                data_dim: codec.data_dim(),
                hidden: params[0].1.shape()[1],
                latent_dim: codec.latent_dim(),
            }
        }
    };
    let manifest = ModelManifest {
        architecture,
        seed,
        dataset_fingerprint: dataset_fingerprint.to_string(),
        schedule: None,
    };
    save_artifact(path, &codec.named_params(), &manifest)
}

pub fn load_codec(path: &Path) -> Result<(Codec, ModelManifest)> {
    let (params, manifest): (_, ModelManifest) = load_artifact(path)?;
    let mut codec = match &manifest.architecture {
        Architecture::IdentityCodec { dim } => Codec::Identity { dim: *dim },
        Architecture::LearnedCodec {
            data_dim,
            hidden,
            latent_dim,
        } => Codec::Learned(LearnedCodec::new(*data_dim, *hidden, *latent_dim, 0)),
        _ => return Err(Error::Format(format!("{} is not a codec", path.display()))),
    };
    codec.load_params(params)?;
    Ok((codec, manifest))
}
