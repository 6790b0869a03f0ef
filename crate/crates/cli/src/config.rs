//! Run configuration: one JSON document drives every subcommand.

use std::path::{Path, PathBuf};

use ledits::schedule::default_beta_range;
use ledits::toy_model::AdamConfig;
use ledits::{Condition, EditParams, GaussianMixture, GuidanceConfig, ScheduleParams, TrainConfig};
use serde::Deserialize;

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: ScheduleSection,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub edit: EditSection,
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub stats: StatsSection,
    /// Source point CSV or PGM image.
    pub input: Option<PathBuf>,
    /// Stored inversion to edit instead of inverting inline.
    pub inversion: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub eta: f64,
    /// Defaults to the 1000-step linear range rescaled to `steps`.
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 100,
            eta: 1.0,
            beta_start: None,
            beta_end: None,
        }
    }
}

impl ScheduleSection {
    pub fn params(&self) -> ScheduleParams {
        let (start, end) = default_beta_range(self.steps);
        ScheduleParams {
            steps: self.steps,
            beta_start: self.beta_start.unwrap_or(start),
            beta_end: self.beta_end.unwrap_or(end),
            eta: self.eta,
        }
    }
}

/// The data domain: a 2-D (or any-d) Gaussian mixture, or 16x16 shapes.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    Mixture(GaussianMixture),
    Images,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSection {
    /// Exact predictor for the configured mixture.
    #[default]
    Analytic,
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSection {
    pub skip: usize,
    pub target: Condition,
    pub guidance: GuidanceConfig,
    pub inversion_condition: Condition,
}

impl Default for EditSection {
    fn default() -> Self {
        let p = EditParams::default();
        Self {
            skip: p.skip,
            target: p.target,
            guidance: p.guidance,
            inversion_condition: p.inversion_condition,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub skips: Vec<usize>,
    pub target_scales: Vec<f64>,
    /// When present, every concept's scale is set to each value in turn.
    pub concept_scales: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub final_lr_fraction: f64,
    pub cond_dropout: f64,
    pub hidden: Vec<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = TrainConfig::default();
        Self {
            epochs: c.epochs,
            steps_per_epoch: c.steps_per_epoch,
            batch_size: c.batch_size,
            adam: c.adam,
            final_lr_fraction: c.final_lr_fraction,
            cond_dropout: c.cond_dropout,
            hidden: c.hidden,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub runs: usize,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self { runs: 200 }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if config.version != CONFIG_VERSION {
            return Err(CliError::config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                config.version
            )));
        }
        Ok(config)
    }

    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config = Self::from_json(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let ModelSection::Checkpoint(p) = &mut config.model {
            resolve(p);
        }
        config.input.as_mut().map(resolve);
        config.inversion.as_mut().map(resolve);
        resolve(&mut config.output_dir);
        Ok(config)
    }

    pub fn edit_params(&self) -> EditParams {
        EditParams {
            schedule: self.schedule.params(),
            skip: self.edit.skip,
            seed: self.seed,
            target: self.edit.target.clone(),
            guidance: self.edit.guidance.clone(),
            inversion_condition: self.edit.inversion_condition.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            steps_per_epoch: t.steps_per_epoch,
            batch_size: t.batch_size,
            adam: t.adam,
            final_lr_fraction: t.final_lr_fraction,
            seed: self.seed,
            cond_dropout: t.cond_dropout,
            hidden: t.hidden.clone(),
        }
    }
}
