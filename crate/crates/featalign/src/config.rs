//! Experiment configuration: JSON schema, presets, and exhaustive
//! validation with field-level error reporting.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{FeatureConfig, GradMode, RInit};
use crate::error::{Error, Result};
use crate::model::LayerSpec;
use crate::optim::AdamConfig;
use crate::vfa::{BetaMode, VfaConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        /// Cap on the number of training examples; the held-out split is
        /// taken after this cap.
        #[serde(default)]
        limit: Option<usize>,
    },
    SyntheticGaussians {
        variant: String,
        n: usize,
    },
    ImageFolder {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Fa,
    Vfa,
    VfaGan,
    LocalFa,
}

/// One experiment, loaded from JSON. Physics-relevant fields (tau, the
/// step counts, lambda, the beta mode) have no defaults and must be
/// explicit; only optimizer settings and bookkeeping fall back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub mode: Mode,
    /// Per-example input extent, e.g. [28, 28].
    pub input_shape: Vec<usize>,
    /// Encoder layers (the trunk, for variational modes).
    pub layers: Vec<LayerSpec>,
    /// Extraction settings used during training.
    pub feature: FeatureConfig,
    /// Extraction steps used for reconstruction at evaluation time.
    pub inference_t_steps: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_grad_mode")]
    pub grad_mode: GradMode,
    /// Latent width; variational modes only.
    #[serde(default)]
    pub latent: Option<usize>,
    /// Class-head width; variational modes only.
    #[serde(default)]
    pub classes: Option<usize>,
    /// KL weight mode; variational modes only.
    #[serde(default)]
    pub beta: Option<BetaMode>,
    #[serde(default)]
    pub std_reparam: bool,
    /// Perceptual-loss weight; vfa-gan only.
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Generator layers mapping the input extent to itself; vfa-gan only.
    #[serde(default)]
    pub generator_layers: Option<Vec<LayerSpec>>,
    /// Discriminator layers mapping the input extent to one score; vfa-gan
    /// only.
    #[serde(default)]
    pub discriminator_layers: Option<Vec<LayerSpec>>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Master seed; every RNG stream is derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn default_grad_mode() -> GradMode {
    GradMode::Unrolled
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<ExperimentConfig> {
        serde_json::from_str(json)
            .map_err(|e| Error::config("<json>", e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let json = fs::read_to_string(path)?;
        serde_json::from_str(&json)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }

    /// Named desk-scale configurations over a 28x28 IDX corpus rooted at
    /// `data_root`.
    pub fn preset(name: &str, data_root: &Path, out_dir: &Path) -> Result<ExperimentConfig> {
        let limit = match name {
            "mnist-desk" => Some(8192),
            "mnist-full" => None,
            other => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset `{}` (want mnist-desk or mnist-full)", other),
                ))
            }
        };
        Ok(ExperimentConfig {
            dataset: DatasetConfig::Mnist {
                images: data_root.join("train-images-idx3-ubyte"),
                labels: data_root.join("train-labels-idx1-ubyte"),
                limit,
            },
            mode: Mode::Fa,
            input_shape: vec![28, 28],
            layers: vec![
                LayerSpec::Linear { fan_in: 784, fan_out: 256, bias: true },
                LayerSpec::LeakyRelu { slope: 0.01 },
                LayerSpec::Linear { fan_in: 256, fan_out: 64, bias: true },
            ],
            feature: FeatureConfig {
                tau: 1.0,
                t_steps: 1,
                r_init: RInit::Gaussian { std: 0.01, seed: 7 },
            },
            inference_t_steps: 20,
            // calibrated so the desk-scale budget (5 epochs x 64 steps)
            // reaches useful reconstructions
            optimizer: AdamConfig { eta: 1e-3, ..AdamConfig::default() },
            grad_mode: GradMode::Unrolled,
            latent: None,
            classes: None,
            beta: None,
            std_reparam: false,
            lambda: None,
            generator_layers: None,
            discriminator_layers: None,
            epochs: 5,
            batch_size: 128,
            seed: 1,
            out_dir: out_dir.to_path_buf(),
        })
    }

    pub fn is_variational(&self) -> bool {
        matches!(self.mode, Mode::Vfa | Mode::VfaGan)
    }

    /// Extraction settings for evaluation-time reconstruction.
    pub fn inference_feature(&self) -> FeatureConfig {
        FeatureConfig {
            t_steps: self.inference_t_steps,
            ..self.feature
        }
    }

    /// The VFA step configuration; variational modes only.
    pub fn vfa_config(&self) -> Result<VfaConfig> {
        Ok(VfaConfig {
            feature: self.feature,
            beta: self
                .beta
                .ok_or_else(|| Error::config("beta", "required in variational modes"))?,
            eps_seed: self.seed ^ 0x6570_7331,
            std_reparam: self.std_reparam,
            recon_weight: 1.0,
        })
    }

    fn require_absent<T>(field: &str, value: &Option<T>, mode: &str) -> Result<()> {
        if value.is_some() {
            return Err(Error::config(
                field,
                format!("only meaningful in {} mode; remove it", mode),
            ));
        }
        Ok(())
    }

    fn check_chain(field: &str, input: &[usize], layers: &[LayerSpec]) -> Result<Vec<usize>> {
        let mut cur = input.to_vec();
        for spec in layers {
            cur = spec
                .output_shape(&cur)
                .map_err(|e| Error::config(field, e.to_string()))?;
        }
        Ok(cur)
    }

    /// Reject any inconsistent, incomplete, or inapplicable setting, naming
    /// the offending field. Referenced dataset paths must exist.
    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::Mnist { images, labels, limit } => {
                if !images.is_file() {
                    return Err(Error::config(
                        "dataset.images",
                        format!("{} does not exist", images.display()),
                    ));
                }
                if !labels.is_file() {
                    return Err(Error::config(
                        "dataset.labels",
                        format!("{} does not exist", labels.display()),
                    ));
                }
                if limit == &Some(0) {
                    return Err(Error::config("dataset.limit", "must be >= 1 when set"));
                }
            }
            DatasetConfig::SyntheticGaussians { variant, n } => {
                if variant != "ring" && variant != "mixed-latents" {
                    return Err(Error::config(
                        "dataset.variant",
                        format!("unknown kind `{}` (want ring or mixed-latents)", variant),
                    ));
                }
                if *n < 2 {
                    return Err(Error::config("dataset.n", "need at least 2 examples"));
                }
            }
            DatasetConfig::ImageFolder { path } => {
                if !path.is_dir() {
                    return Err(Error::config(
                        "dataset.path",
                        format!("{} is not a directory", path.display()),
                    ));
                }
            }
        }

        if self.input_shape.is_empty() || self.input_shape.iter().product::<usize>() == 0 {
            return Err(Error::config("input_shape", "must be non-empty with positive extents"));
        }
        if self.layers.is_empty() {
            return Err(Error::config("layers", "need at least one layer"));
        }
        Self::check_chain("layers", &self.input_shape, &self.layers)?;

        self.feature
            .validate()
            .map_err(|e| Error::config("feature", e.to_string()))?;
        if self.inference_t_steps == 0 {
            return Err(Error::config("inference_t_steps", "must be >= 1"));
        }
        if !(self.optimizer.eta > 0.0) || !self.optimizer.eta.is_finite() {
            return Err(Error::config("optimizer.eta", "must be finite and > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }

        if self.is_variational() {
            match self.latent {
                None => return Err(Error::config("latent", "required in variational modes")),
                Some(0) => return Err(Error::config("latent", "must be >= 1")),
                _ => {}
            }
            if self.beta.is_none() {
                return Err(Error::config("beta", "required in variational modes"));
            }
            if self.classes == Some(0) {
                return Err(Error::config("classes", "must be >= 1 when set"));
            }
        } else {
            Self::require_absent("latent", &self.latent, "a variational")?;
            Self::require_absent("classes", &self.classes, "a variational")?;
            Self::require_absent("beta", &self.beta, "a variational")?;
            if self.std_reparam {
                return Err(Error::config("std_reparam", "only meaningful in a variational mode"));
            }
        }

        if self.mode == Mode::VfaGan {
            match self.lambda {
                None => return Err(Error::config("lambda", "required in vfa-gan mode")),
                Some(l) if !(l >= 0.0) || !l.is_finite() => {
                    return Err(Error::config("lambda", "must be finite and >= 0"))
                }
                _ => {}
            }
            let gen = self
                .generator_layers
                .as_ref()
                .ok_or_else(|| Error::config("generator_layers", "required in vfa-gan mode"))?;
            let out = Self::check_chain("generator_layers", &self.input_shape, gen)?;
            if out.iter().product::<usize>() != self.input_shape.iter().product::<usize>() {
                return Err(Error::config(
                    "generator_layers",
                    format!("must map the input extent to itself, got {:?}", out),
                ));
            }
            let disc = self
                .discriminator_layers
                .as_ref()
                .ok_or_else(|| Error::config("discriminator_layers", "required in vfa-gan mode"))?;
            let out = Self::check_chain("discriminator_layers", &self.input_shape, disc)?;
            if out.iter().product::<usize>() != 1 {
                return Err(Error::config(
                    "discriminator_layers",
                    format!("must map the input extent to one score, got {:?}", out),
                ));
            }
        } else {
            Self::require_absent("lambda", &self.lambda, "vfa-gan")?;
            Self::require_absent("generator_layers", &self.generator_layers, "vfa-gan")?;
            Self::require_absent("discriminator_layers", &self.discriminator_layers, "vfa-gan")?;
        }

        if self.mode == Mode::LocalFa {
            for (i, spec) in self.layers.iter().enumerate() {
                if spec.is_activation() && *spec != LayerSpec::Arsinh {
                    return Err(Error::config(
                        "layers",
                        format!(
                            "local-fa reconstruction needs arsinh activations, layer {} is {:?}",
                            i, spec
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}
