//! One TOML file holding every tunable of a run. Missing keys take their
//! defaults and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::body_model::SyntheticBodyConfig;
use crate::dataio::GenerateOptions;
use crate::error::{Error, Result};
use crate::fitting::FitOptions;
use crate::gaussian::ScaffoldConfig;
use crate::losses::LossWeights;
use crate::predictor::{PredictorConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub body: SyntheticBodyConfig,
    pub generate: GenerateOptions,
    pub scaffold: ScaffoldConfig,
    pub fit: FitOptions,
    pub predictor: PredictorConfig,
    pub train: TrainConfig,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_toml(path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

/// Loss weights from a TOML file with the [`LossWeights`] keys at top level.
pub fn load_weights(path: &Path) -> Result<LossWeights> {
    let w: LossWeights = read_toml(path)?;
    w.validate()?;
    Ok(w)
}
