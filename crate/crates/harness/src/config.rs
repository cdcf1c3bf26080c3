//! Experiment configuration: one JSON document with a section per concern.
//! Every field has a default, so `{}` is a valid config; unknown keys are
//! rejected with their key path.

use std::path::{Path, PathBuf};

use mtm_core::envs::{EnvConfig, Quality, ScriptedPolicySpec};
use mtm_core::model::ModelConfig;
use mtm_core::reprrl::Td3Config;
use mtm_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::BaselineConfig;
use crate::error::{io_err, HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_trajectories: usize,
    pub eval_fraction: f64,
    pub policy: ScriptedPolicySpec,
    /// Load this MTMD file instead of generating.
    pub path: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            n_trajectories: 1000,
            eval_fraction: 0.1,
            policy: ScriptedPolicySpec::mixture(vec![(Quality::Expert, 0.2), (Quality::Medium, 0.4), (Quality::Random, 0.4)]),
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub episodes: usize,
    /// RCBC target return; `None` means the expert reference return.
    pub target_return: Option<f64>,
    /// Number of evenly spaced target returns, random to expert reference,
    /// for return-conditioning sweeps.
    pub rtg_levels: usize,
    /// Also train and report the specialized MLP baselines.
    pub baseline: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: mtm_core::capabilities::DEFAULT_EVAL_EPISODES,
            target_return: None,
            rtg_levels: 5,
            baseline: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeteroSection {
    pub n_trajectories: usize,
    pub policy: ScriptedPolicySpec,
    pub actioned_fraction: f64,
    pub state_only_fraction: f64,
}

impl Default for HeteroSection {
    fn default() -> Self {
        Self {
            n_trajectories: 1000,
            policy: ScriptedPolicySpec::single(Quality::Expert),
            actioned_fraction: 0.01,
            state_only_fraction: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub fractions: Vec<f64>,
    pub segment_lengths: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            fractions: vec![0.01, 0.05, 0.1, 0.5, 1.0],
            segment_lengths: vec![2, 4, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    /// Exploration data for pretraining and offline TD3.
    pub n_trajectories: usize,
    pub policy: ScriptedPolicySpec,
    /// Pretraining steps of the encoder (the rest of `train` applies).
    pub pretrain_steps: u64,
}

impl Default for TransferSection {
    fn default() -> Self {
        Self {
            n_trajectories: 200,
            policy: ScriptedPolicySpec::single(Quality::Random),
            pretrain_steps: 1500,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub baseline: BaselineConfig,
    pub hetero: HeteroSection,
    pub sweep: SweepSection,
    pub transfer: TransferSection,
    pub td3: Td3Config,
}

impl ExperimentConfig {
    /// Parses and resolves a config; errors carry the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| HarnessError::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.resolve()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    /// Copies the environment's dimensions into the model and checks
    /// cross-section consistency.
    pub fn resolve(mut self) -> Result<Self> {
        self.model.state_dim = self.env.state_dim;
        self.model.action_dim = self.env.action_dim;
        if self.model.segment_len != self.train.segment_len {
            return Err(HarnessError::Config {
                path: "train.segment_len".into(),
                message: format!("differs from model.segment_len ({} vs {})", self.train.segment_len, self.model.segment_len),
            });
        }
        let check = |path: &str, r: mtm_core::Result<()>| {
            r.map_err(|e| HarnessError::Config {
                path: path.into(),
                message: e.to_string(),
            })
        };
        check("model", self.model.validate())?;
        check("train", self.train.validate())?;
        check("td3", self.td3.validate())?;
        check("dataset.policy", self.dataset.policy.validate())?;
        check("baseline", self.baseline.validate())?;
        Ok(self)
    }

    /// The run seed drives data generation, initialization and training;
    /// the environment's own seed (its identity) is left alone.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.td3.seed = seed;
        self.baseline.seed = seed;
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(serde_json::to_vec(self)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
