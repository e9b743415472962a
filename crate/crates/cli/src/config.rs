use std::path::{Path, PathBuf};

use nimbus_core::eval::EvalConfig;
use nimbus_core::model::ModelConfig;
use nimbus_core::optim::TrainConfig;
use nimbus_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    /// Overrides the manifest's non-rainy volume threshold.
    pub filter_threshold: Option<f64>,
    /// Overrides the manifest's dropped bands; band statistics are then recomputed.
    pub drop_bands: Option<Vec<String>>,
}

/// Full run configuration. Every field is optional; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSection,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Keeps the shared settings consistent: the event threshold and loss
    /// kind used for training are the ones used for evaluation.
    pub fn reconcile(&mut self) {
        self.train.rain_threshold = self.eval.threshold;
        self.eval.loss = self.train.loss;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if let Some(t) = self.data.filter_threshold {
            if !(t >= 0.0) {
                return Err(Error::config(format!("filter_threshold must be >= 0, got {t}")));
            }
        }
        Ok(())
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}
