use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::alignment::RewardConfig;
use crate::counterfactual::RuleSet;
use crate::metrics::MetricsConfig;
use crate::miner::MiningConfig;
use crate::preprocess::CleanConfig;
use crate::synthesis::SynthesisConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub clean: CleanConfig,
    pub mining: MiningConfig,
    pub counterfactual: CounterfactualConfig,
    pub synthesis: SynthesisConfig,
    pub reward: RewardConfig,
    pub alignment: AlignmentConfig,
    pub metrics: MetricsConfig,
    pub io: IoConfig,
    pub parallelism: ParallelismConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterfactualConfig {
    /// Rule file; the bundled rules are used when unset.
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    pub orpo_lambda: f64,
    /// Outputs per group for advantage normalisation.
    pub group_size: usize,
    /// Samples expected per prompt when pairing.
    pub samples_per_prompt: usize,
    pub sampling_temperature: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            orpo_lambda: 0.1,
            group_size: 5,
            samples_per_prompt: 5,
            sampling_temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParallelismConfig {
    /// Worker threads; 0 means one per logical CPU.
    pub workers: usize,
}

impl PipelineConfig {
    pub fn from_toml_str(source: &str) -> Result<Self, PipelineError> {
        toml::from_str(source).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let source = std::fs::read_to_string(path).map_err(|source| PipelineError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&source)
    }

    pub fn rule_set(&self) -> Result<RuleSet, PipelineError> {
        match &self.counterfactual.rules {
            None => Ok(RuleSet::default()),
            Some(path) => {
                let source = std::fs::read_to_string(path).map_err(|source| PipelineError::Read {
                    path: path.clone(),
                    source,
                })?;
                RuleSet::from_toml(&source).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
            }
        }
    }
}
