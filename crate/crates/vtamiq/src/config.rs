//! Run configuration: one TOML file binding the model architecture,
//! sampler, training schedule, dataset, and evaluation settings. Unknown
//! keys are rejected and referenced paths are checked at load time.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{NormalizationSpec, ScoreDirection};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;
use crate::training::TrainConfig;

/// Numeric element width for the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Dataset binding for train/eval commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub manifest: PathBuf,
    #[serde(default)]
    pub score_direction: ScoreDirection,
    #[serde(default = "default_fractions")]
    pub split_fractions: (f64, f64, f64),
    /// Separate split seed; defaults to the run seed.
    #[serde(default)]
    pub split_seed: Option<u64>,
}

fn default_fractions() -> (f64, f64, f64) {
    (0.6, 0.2, 0.2)
}

/// The full run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub precision: Precision,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub training: TrainConfig,
    pub dataset: Option<DatasetSection>,
    pub normalization: NormalizationSpec,
    pub evaluation: EvalConfig,
}

impl RunConfig {
    /// Parses and validates a TOML run configuration.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;

        // Relative paths resolve against the config file location.
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if let Some(ds) = &mut cfg.dataset {
            if ds.manifest.is_relative() {
                ds.manifest = base.join(&ds.manifest);
            }
        }
        if let Some(out) = &mut cfg.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.effective_sampler().validate()?;
        if self.evaluation.runs == 0 || self.evaluation.n_patches == 0 {
            return Err(Error::Config(
                "evaluation runs and n_patches must be positive".into(),
            ));
        }
        if let Some(ds) = &self.dataset {
            if !ds.manifest.exists() {
                return Err(Error::Config(format!(
                    "dataset manifest {} does not exist",
                    ds.manifest.display()
                )));
            }
            let (a, b, c) = ds.split_fractions;
            if (a + b + c - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "split fractions {:?} must sum to 1",
                    ds.split_fractions
                )));
            }
        }
        Ok(())
    }

    /// Sampler with the patch size taken from the model architecture.
    pub fn effective_sampler(&self) -> SamplerConfig {
        SamplerConfig {
            patch_size: self.model.vit.patch_size,
            ..self.sampler.clone()
        }
    }

    pub fn split_seed(&self) -> u64 {
        self.dataset
            .as_ref()
            .and_then(|d| d.split_seed)
            .unwrap_or(self.seed)
    }
}
