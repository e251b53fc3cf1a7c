//! Run configuration: one TOML file with a section per command.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use semedit::models::{ClassifierTrainConfig, DenoiserConfig, DenoiserTrainConfig};
use semedit::semantic::EditConfig;
use semedit::synthdata::{Attribute, PIXELS};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every random stream of the run.
    pub seed: u64,
    /// Run directory shared by all commands.
    pub out: PathBuf,
    pub data: DataSection,
    pub denoiser: DenoiserSection,
    pub classifier: ClassifierSections,
    pub embedding: EmbeddingSection,
    pub edit: EditSection,
    pub diagnose: DiagnoseSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("run"),
            data: DataSection::default(),
            denoiser: DenoiserSection::default(),
            classifier: ClassifierSections::default(),
            embedding: EmbeddingSection::default(),
            edit: EditSection::default(),
            diagnose: DiagnoseSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n: usize,
    pub train_frac: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { n: 800, train_frac: 0.75 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub condition_dim: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub drop_prob: f64,
    pub token_drop_prob: f64,
    pub cosine_decay: bool,
    /// Length of the training noise schedule.
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        let arch = DenoiserConfig::for_latent(PIXELS, vec![2, 2]);
        let train = DenoiserTrainConfig::default();
        DenoiserSection {
            hidden: arch.hidden,
            blocks: arch.blocks,
            time_dim: arch.time_dim,
            condition_dim: arch.condition_dim,
            epochs: train.epochs,
            batch: train.batch,
            lr: train.lr,
            weight_decay: train.weight_decay,
            drop_prob: train.drop_prob,
            token_drop_prob: train.token_drop_prob,
            cosine_decay: train.cosine_decay,
            t_max: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl DenoiserSection {
    pub fn architecture(&self) -> DenoiserConfig {
        DenoiserConfig {
            latent_dim: PIXELS,
            hidden: self.hidden,
            blocks: self.blocks,
            time_dim: self.time_dim,
            condition_dim: self.condition_dim,
            attr_classes: vec![2, 2],
        }
    }

    pub fn train(&self, seed: u64) -> DenoiserTrainConfig {
        DenoiserTrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            weight_decay: self.weight_decay,
            drop_prob: self.drop_prob,
            token_drop_prob: self.token_drop_prob,
            cosine_decay: self.cosine_decay,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    pub feature_dim: usize,
    pub input_noise: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let d = ClassifierTrainConfig::default();
        ClassifierSection {
            epochs: d.epochs,
            batch: d.batch,
            lr: d.lr,
            weight_decay: d.weight_decay,
            hidden: d.hidden,
            feature_dim: d.feature_dim,
            input_noise: 0.4,
        }
    }
}

impl ClassifierSection {
    pub fn train(&self, seed: u64) -> ClassifierTrainConfig {
        ClassifierTrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            weight_decay: self.weight_decay,
            hidden: self.hidden,
            feature_dim: self.feature_dim,
            input_noise: self.input_noise,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSections {
    pub attributes: Vec<Attribute>,
    pub shape: ClassifierSection,
    pub stripe: ClassifierSection,
}

impl Default for ClassifierSections {
    fn default() -> Self {
        ClassifierSections {
            attributes: vec![Attribute::Shape, Attribute::Stripe],
            shape: ClassifierSection::default(),
            stripe: ClassifierSection {
                weight_decay: 5.0,
                ..ClassifierSection::default()
            },
        }
    }
}

impl ClassifierSections {
    pub fn get(&self, a: Attribute) -> &ClassifierSection {
        match a {
            Attribute::Shape => &self.shape,
            Attribute::Stripe => &self.stripe,
        }
    }
}

/// Guidance settings shared by embedding learning and editing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    pub lambda: f64,
    pub l_frac: f64,
    pub gamma: f64,
    pub window: (f64, f64),
    pub steps: usize,
    pub n_tokens: usize,
    pub lr: f64,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        let d = EditConfig::default();
        GuidanceSection {
            lambda: d.lambda,
            l_frac: d.l_frac,
            gamma: d.gamma,
            window: d.window,
            steps: d.steps,
            n_tokens: d.n_tokens,
            lr: d.lr,
        }
    }
}

impl GuidanceSection {
    pub fn edit_config(&self, seed: u64) -> EditConfig {
        EditConfig {
            lambda: self.lambda,
            l_frac: self.l_frac,
            gamma: self.gamma,
            window: self.window,
            steps: self.steps,
            n_tokens: self.n_tokens,
            lr: self.lr,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub attributes: Vec<Attribute>,
    pub iters: usize,
    pub batch: usize,
    /// Leading training images the embeddings are optimized on.
    pub train_images: usize,
    /// Held-out images used to score edit success after training (0 skips it).
    pub eval_images: usize,
    pub guidance: GuidanceSection,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        EmbeddingSection {
            attributes: vec![Attribute::Shape, Attribute::Stripe],
            iters: 1000,
            batch: 32,
            train_images: 200,
            eval_images: 64,
            guidance: GuidanceSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    /// Guidance over the whole window.
    Multi,
    /// Guidance at the first in-window step only.
    Single,
    /// One edit per entry of `lambdas`.
    Interpolate,
    /// Both attributes at once from concatenated embeddings.
    MultiAttribute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSection {
    pub mode: EditMode,
    pub attribute: Attribute,
    pub n_images: usize,
    pub lambdas: Vec<f64>,
    /// Images per row of the output grid.
    pub grid_cols: usize,
    pub guidance: GuidanceSection,
}

impl Default for EditSection {
    fn default() -> Self {
        EditSection {
            mode: EditMode::Multi,
            attribute: Attribute::Stripe,
            n_images: 64,
            lambdas: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            grid_cols: 16,
            guidance: GuidanceSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    pub attribute: Attribute,
    pub sigma2s: Vec<f64>,
    pub l_fracs: Vec<f64>,
    pub n_probe: usize,
    pub n_noise: usize,
    pub n_images: usize,
    pub target: usize,
    /// Generate the alignment images with full edits instead of the one-step estimate.
    pub multi_step_alignment: bool,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        DiagnoseSection {
            attribute: Attribute::Stripe,
            sigma2s: vec![0.1, 0.5, 1.0, 2.0],
            l_fracs: vec![0.1, 0.4, 1.0],
            n_probe: 64,
            n_noise: 4,
            n_images: 64,
            target: 0,
            multi_step_alignment: false,
        }
    }
}
