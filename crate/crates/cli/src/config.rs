//! Experiment configuration files and their canonical hash.

use std::path::{Path, PathBuf};

use fedpet_core::attack::AttackConfig;
use fedpet_core::data::SyntheticSpec;
use fedpet_core::delta::DeltaSpec;
use fedpet_core::federation::FederationConfig;
use fedpet_core::model::ModelConfig;
use fedpet_core::optim::OptimizerConfig;
use fedpet_core::partition::PartitionConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Backbone pretraining on a label-permuted copy of the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub examples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 500,
            lr: 1e-3,
            examples: 2000,
        }
    }
}

/// A Dirichlet split; the client count comes from the federation and the
/// seed from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub alpha: f64,
    #[serde(default = "ten")]
    pub min_per_client: usize,
}

fn ten() -> usize {
    10
}

impl PartitionSpec {
    pub fn resolve(&self, n_clients: usize, seed: u64) -> PartitionConfig {
        PartitionConfig {
            alpha: self.alpha,
            n_clients,
            min_per_client: self.min_per_client,
            seed,
        }
    }
}

/// One tuning method and the optimizer its clients use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub delta: DeltaSpec,
    pub optimizer: OptimizerConfig,
}

/// Gradient inversion experiments on a separate small model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSetup {
    pub model: ModelConfig,
    pub seq_len: usize,
    pub batch_sizes: Vec<usize>,
    pub methods: Vec<DeltaSpec>,
    pub trials: usize,
    pub optimizer: OptimizerConfig,
    pub local_steps: usize,
    pub dlg: AttackConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub model: ModelConfig,
    pub data: SyntheticSpec,
    pub pretrain: PretrainConfig,
    /// One federated sweep per entry.
    pub partitions: Vec<PartitionSpec>,
    pub federation: FederationConfig,
    /// Local epoch counts to sweep; empty means `federation.local_epochs`.
    #[serde(default)]
    pub local_epochs: Vec<usize>,
    pub methods: Vec<MethodConfig>,
    /// Also train every method on pooled data.
    pub centralized: bool,
    #[serde(default)]
    pub attack: Option<AttackSetup>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub repeat: usize,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!("unsupported schema_version {}", self.schema_version)));
        }
        if self.repeat == 0 {
            return Err(invalid("repeat must be at least 1"));
        }
        self.model.validate()?;
        self.data.validate()?;
        if self.data.n_labels != self.model.n_labels || self.data.vocab_size != self.model.vocab_size {
            return Err(invalid("data labels and vocabulary must match the model"));
        }
        if self.data.seq_len > self.model.max_positions {
            return Err(invalid("data seq_len exceeds model max_positions"));
        }
        if self.pretrain.steps > 0 && (self.pretrain.lr <= 0.0 || self.pretrain.examples < 10) {
            return Err(invalid("pretraining needs a positive lr and at least 10 examples"));
        }
        if self.methods.is_empty() {
            return Err(invalid("at least one method is required"));
        }
        for m in &self.methods {
            m.delta.validate(&self.model)?;
            m.optimizer.validate()?;
        }
        self.federation.validate()?;
        for p in &self.partitions {
            p.resolve(self.federation.total_clients, self.seed).validate()?;
            let need = self.federation.total_clients * p.min_per_client;
            if need > self.data.n_examples * 8 / 10 {
                return Err(invalid(format!(
                    "{} clients with at least {} examples need a larger training split",
                    self.federation.total_clients, p.min_per_client
                )));
            }
        }
        if self.local_epochs.contains(&0) {
            return Err(invalid("local epochs must be at least 1"));
        }
        if let Some(a) = &self.attack {
            a.model.validate()?;
            a.dlg.validate()?;
            a.optimizer.validate()?;
            if a.model.vocab_size != self.data.vocab_size || a.model.n_labels != self.data.n_labels {
                return Err(invalid("attack model labels and vocabulary must match the data"));
            }
            if a.seq_len == 0 || a.seq_len > a.model.max_positions {
                return Err(invalid("attack seq_len must lie in [1, max_positions]"));
            }
            if a.batch_sizes.is_empty() || a.batch_sizes.contains(&0) || a.trials == 0 || a.local_steps == 0 {
                return Err(invalid("attack batch sizes, trials and local_steps must be positive"));
            }
            if a.batch_sizes.iter().any(|b| b * a.seq_len > 64) {
                return Err(invalid("attack batches are limited to 64 positions"));
            }
            for m in &a.methods {
                m.validate(&a.model)?;
            }
        }
        Ok(())
    }

    /// Epoch counts actually swept.
    pub fn epoch_grid(&self) -> Vec<usize> {
        if self.local_epochs.is_empty() {
            vec![self.federation.local_epochs]
        } else {
            self.local_epochs.clone()
        }
    }

    /// Seeds of the repeated runs.
    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.repeat as u64).map(move |r| self.seed + r)
    }

    /// SHA-256 of the canonical JSON form (sorted keys, no whitespace).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        canonical_hash(&value)
    }
}

/// Hash of a JSON value with object keys sorted.
pub fn canonical_hash(value: &serde_json::Value) -> String {
    // serde_json's map is ordered by key unless `preserve_order` is enabled.
    let text = serde_json::to_string(value).expect("value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::preset;

    #[test]
    fn hash_ignores_key_order_and_whitespace() {
        let a = r#"{"b": 1, "a": {"y": [1, 2], "x": null}}"#;
        let b = r#"{"a":{"x":null,"y":[1,2]},"b":1}"#;
        let va: serde_json::Value = serde_json::from_str(a).unwrap();
        let vb: serde_json::Value = serde_json::from_str(b).unwrap();
        assert_eq!(canonical_hash(&va), canonical_hash(&vb));
        let vc: serde_json::Value = serde_json::from_str(r#"{"b":2,"a":{"x":null,"y":[1,2]}}"#).unwrap();
        assert_ne!(canonical_hash(&va), canonical_hash(&vc));
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_fields() {
        let cfg = preset("main").unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(CliError::Config(_))));
    }

    #[test]
    fn validation_catches_mismatches() {
        let mut cfg = preset("main").unwrap();
        cfg.repeat = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = preset("main").unwrap();
        cfg.partitions[0].alpha = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = preset("main").unwrap();
        cfg.data.vocab_size = 100;
        assert!(cfg.validate().is_err());
    }
}
