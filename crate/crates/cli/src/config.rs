//! JSON run configuration and the flag > file > default precedence rules.

use std::path::{Path, PathBuf};

use actseg_core::model::ModelConfig;
use actseg_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

/// Optional fields from a `--config` JSON document. Anything absent falls
/// back to built-in defaults; command-line flags override anything here.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub manifest: Option<PathBuf>,
    pub classes: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: ModelOverrides,
    pub train: TrainOverrides,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub num_blocks: Option<usize>,
    pub num_decoders: Option<usize>,
    pub feature_dim: Option<usize>,
    pub model_dim: Option<usize>,
    pub num_classes: Option<usize>,
    pub input_dropout: Option<f64>,
    pub alpha_decay: Option<f64>,
    pub lambda: Option<f64>,
    pub window_base: Option<usize>,
}

impl ModelOverrides {
    /// Writes every present field into `config`.
    pub fn apply(&self, config: &mut ModelConfig) {
        if let Some(v) = self.num_blocks {
            config.num_blocks = v;
        }
        if let Some(v) = self.num_decoders {
            config.num_decoders = v;
        }
        if let Some(v) = self.feature_dim {
            config.feature_dim = v;
        }
        if let Some(v) = self.model_dim {
            config.model_dim = v;
        }
        if let Some(v) = self.num_classes {
            config.num_classes = v;
        }
        if let Some(v) = self.input_dropout {
            config.input_dropout = v;
        }
        if let Some(v) = self.alpha_decay {
            config.alpha_decay = v;
        }
        if let Some(v) = self.lambda {
            config.lambda = v;
        }
        if let Some(v) = self.window_base {
            config.window_base = v;
        }
    }
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
}

impl TrainOverrides {
    pub fn apply(&self, config: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            config.learning_rate = v;
        }
    }
}

impl FileConfig {
    /// Loads the document at `path`, or returns an all-default config when
    /// no `--config` was given.
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        if !path.exists() {
            return Err(CliError::Config(format!("config not found: {}", path.display())));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}
