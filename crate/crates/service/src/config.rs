//! Run configuration file shared by `train` and `sweep-beta`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use refnet_core::preprocess::FusionConfig;
use refnet_core::refnet::ModelConfig;
use refnet_core::trainer::loss::LossConfig;
use refnet_core::trainer::TrainConfig;
use refnet_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSection {
    /// `null` trains on OCT alone.
    pub beta: Option<f64>,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self { beta: Some(0.2) }
    }
}

/// `{"model": .., "train": .., "loss": .., "fusion": {"beta": ..}}`; every
/// section and key is optional. The `loss` and `fusion` sections take
/// precedence over `train.loss` and `train.beta`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub fusion: FusionSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Training settings with the `loss` and `fusion` sections folded in.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut t = self.train.clone();
        t.loss = self.loss;
        t.beta = self.fusion.beta.map(FusionConfig::new).transpose()?;
        t.validate()?;
        self.model.validate()?;
        Ok(t)
    }
}
