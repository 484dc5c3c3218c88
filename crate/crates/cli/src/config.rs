//! Experiment configuration: one TOML file, overridable from the command line.

use std::path::{Path, PathBuf};

use owssl_core::{DatasetSpec, EstimatorConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// Also write `confusion.csv` after training or evaluation.
    pub emit_confusion: bool,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub estimator: EstimatorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            emit_confusion: true,
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            estimator: EstimatorConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Canonical TOML form; parsing it back gives an equal config.
    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("serializing config: {e}")))
    }

    /// Uses `seed` for data generation, training and estimation alike.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self.estimator.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: owssl_core::Error| CliError::Config(e.to_string());
        self.dataset.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        self.estimator
            .k_range(self.dataset.num_seen)
            .map_err(invalid)?;
        if self.train.ncd_mode && self.head_novel() == 0 {
            return Err(CliError::Config(
                "ncd_mode needs at least one novel class".into(),
            ));
        }
        Ok(())
    }

    /// Novel columns of the model head.
    pub fn head_novel(&self) -> usize {
        self.train
            .num_novel_override
            .unwrap_or(self.dataset.num_novel)
    }

    /// Switches to novel class discovery: every seen sample is labeled, so
    /// the unlabeled pool holds only novel classes, and pseudo-labels cover
    /// novel columns only.
    pub fn into_ncd(mut self) -> Self {
        self.dataset.labeled_fraction = 1.0;
        self.train.ncd_mode = true;
        self
    }
}
