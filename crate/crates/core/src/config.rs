//! Top-level run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::InjectionSpec;
use crate::error::{Error, Result};
use crate::graphlearn::GraphConfig;
use crate::model::ModelConfig;
use crate::preprocess::PreprocessConfig;
use crate::scoring::ThresholdMethod;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub nodes: usize,
    pub modalities: usize,
    pub length: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nodes: 8,
            modalities: 3,
            length: 4000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Master seed; see [`Config::with_seed`].
    pub seed: u64,
    /// Fraction of ticks (from the start) used for training.
    pub train_fraction: f64,
    pub preprocess: PreprocessConfig,
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub threshold: ThresholdMethod,
    pub synth: SynthConfig,
    /// Applied to the test split, in order.
    pub injections: Vec<InjectionSpec>,
    /// Windows per forward pass when scoring.
    pub eval_batch: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 42,
            train_fraction: 0.8,
            preprocess: PreprocessConfig::default(),
            graph: GraphConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            threshold: ThresholdMethod::default(),
            synth: SynthConfig::default(),
            injections: vec![InjectionSpec::default()],
            eval_batch: 8,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Sets the master seed and every seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        for (i, inj) in self.injections.iter_mut().enumerate() {
            inj.seed = seed.wrapping_add(1 + i as u64);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        if self.eval_batch == 0 {
            return Err(Error::InvalidArgument("eval_batch must be positive".into()));
        }
        self.preprocess.validate()?;
        self.train.validate()?;
        for inj in &self.injections {
            inj.validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{:02x}", b)).collect()
    }
}
