use std::fs;
use std::path::{Path, PathBuf};

use fisa_core::generator::CorruptionConfig;
use fisa_core::metrics::OracleMode;
use fisa_core::model::ModelConfig;
use fisa_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run depends on. Archived verbatim as `config.json` in each
/// output directory; feeding it back with `--config` reproduces the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub proposals: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    /// Leading fraction of the training set to use.
    pub data_fraction: f64,
    pub generator: CorruptionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub oracle: OracleMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            eval_data: None,
            proposals: None,
            checkpoint: None,
            out_dir: None,
            seed: 0,
            data_fraction: 1.0,
            generator: CorruptionConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            oracle: OracleMode::None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Propagates the run seed into model init, batch sampling and proposal
    /// corruption.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
        self.generator.seed = seed;
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).map_err(CliError::runtime)?;
        text.push('\n');
        let path = dir.join("config.json");
        fs::write(&path, text).map_err(|e| CliError::runtime(anyhow::anyhow!("writing {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(CliError::usage(format!("data_fraction must lie in (0, 1], got {}", self.data_fraction)));
        }
        self.model.validate().map_err(CliError::from)?;
        self.train.validate().map_err(CliError::from)?;
        self.generator.validate().map_err(CliError::from)?;
        Ok(())
    }
}
