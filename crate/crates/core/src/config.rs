//! One document holding every module's configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{BenchmarkConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::narrate::GeneratorConfig;
use crate::policy::{DqnConfig, EpisodeConfig};
use crate::synthesis::SynthesisConfig;

/// Every field has a default; unknown keys are rejected by name at any depth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. [`RunConfig::seeded`] copies it into every module.
    pub seed: u64,
    /// Artifact directory; falls back to `NGD_DATA_DIR`, then `./ngd-data`.
    pub data_dir: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub detector: TrainConfig,
    pub benchmark: BenchmarkConfig,
    pub synthesis: SynthesisConfig,
    pub dqn: DqnConfig,
    pub episode: EpisodeConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Same configuration with `seed` as the master seed of every module.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.generator.seed = seed;
        self.detector.seed = seed;
        self.synthesis.seed = seed;
        self.dqn.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.detector.validate()?;
        self.dqn.validate()?;
        self.episode.validate()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os("NGD_DATA_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("ngd-data"))
    }
}
