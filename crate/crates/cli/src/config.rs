//! TOML config file with one optional table per command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analyze::{SensitivityConfig, StatsConfig};
use crate::bench::BenchConfig;
use crate::breakdown::BreakdownConfig;
use crate::error::{CliError, Result};
use crate::synth::SynthSpec;
use crate::train::TrainConfig;
use crate::verify::VerifyConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub verify: VerifyConfig,
    pub bench: BenchConfig,
    pub breakdown: BreakdownConfig,
    pub sensitivity: SensitivityConfig,
    pub stats: StatsConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Applies a global `--seed` to every command.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.verify.seed = seed;
        self.bench.seed = seed;
        self.breakdown.seed = seed;
        self.sensitivity.seed = seed;
    }
}
