use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::DomainShiftSpec;
use crate::error::{MetfaError, Result};
use crate::eval::AblationName;
use crate::losses::LossWeights;
use crate::model::NetConfig;
use crate::optim::OptConfig;

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub net: NetConfig,
    pub opt: OptConfig,
    pub weights: LossWeights,
    pub shift: DomainShiftSpec,
    pub ablation: AblationName,
    pub output_dir: PathBuf,
    /// Training seed: parameter init, batch sampling and embedding noise.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            opt: OptConfig::default(),
            weights: LossWeights::default(),
            shift: DomainShiftSpec::default(),
            ablation: AblationName::Metfa5,
            output_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.opt.validate()?;
        self.weights.validate()?;
        self.shift.validate()?;
        if self.net.num_classes != self.shift.num_classes {
            return Err(MetfaError::Config(format!(
                "net.num_classes = {} but shift.num_classes = {}",
                self.net.num_classes, self.shift.num_classes
            )));
        }
        if self.net.input_dim != self.shift.input_dim {
            return Err(MetfaError::Config(format!(
                "net.input_dim = {} but shift.input_dim = {}",
                self.net.input_dim, self.shift.input_dim
            )));
        }
        Ok(())
    }

    /// Loss weights after applying the ablation mask.
    pub fn effective_weights(&self) -> LossWeights {
        self.weights.masked(self.ablation.terms())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
