//! One TOML file drives every pipeline command. All fields are optional
//! with reference defaults; unknown keys are rejected so typos fail loudly.

use crate::data::preprocess::HvgCriterion;
use crate::data::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::GraphConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Cohort root: one subdirectory per slide bundle.
    pub data: PathBuf,
    /// Output directory for checkpoints, reports, and plots.
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data: PathBuf::from("data"), out: PathBuf::from("out") }
    }
}

/// Synthetic cohort settings: slide geometry plus cohort layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_patients: usize,
    pub slides_per_patient: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    pub d: usize,
    pub m: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let slide = SynthConfig::default();
        Self {
            n_patients: 4,
            slides_per_patient: 1,
            n_rows: slide.n_rows,
            n_cols: slide.n_cols,
            d: slide.d,
            m: slide.m,
            latent_dim: slide.latent_dim,
            noise_sigma: slide.noise_sigma,
        }
    }
}

impl SynthSection {
    pub fn slide(&self) -> SynthConfig {
        SynthConfig {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            d: self.d,
            m: self.m,
            latent_dim: self.latent_dim,
            noise_sigma: self.noise_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Param { name: "n_patients", details: "must be positive".into() });
        }
        if self.slides_per_patient == 0 {
            return Err(Error::Param {
                name: "slides_per_patient",
                details: "must be positive".into(),
            });
        }
        self.slide().validate()
    }
}

/// Highly-variable-gene selection settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HvgConfig {
    /// Panel size (clamped to the available genes).
    pub k: usize,
    pub criterion: HvgCriterion,
}

impl Default for HvgConfig {
    fn default() -> Self {
        Self { k: 20, criterion: HvgCriterion::Lognorm }
    }
}

impl HvgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Param { name: "hvg.k", details: "must be positive".into() });
        }
        Ok(())
    }
}

/// Complete run configuration.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed for every random decision (overridable by `--seed` and
    /// the `PHG2ST_SEED` environment variable).
    pub seed: u64,
    /// Held-out validation patient for `train`. Defaults to the
    /// lexicographically last patient in the cohort.
    pub val_patient: Option<String>,
    pub paths: PathsConfig,
    pub synth: SynthSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub graph: GraphConfig,
    pub hvg: HvgConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.graph.validate()?;
        self.hvg.validate()
    }
}

/// Parses a TOML run configuration.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: RunConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}
