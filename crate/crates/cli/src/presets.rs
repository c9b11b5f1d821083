//! Named experiment presets at desk scale.

use std::path::PathBuf;

use fedpet_core::attack::AttackConfig;
use fedpet_core::data::SyntheticSpec;
use fedpet_core::delta::{DeltaSpec, LoraTarget};
use fedpet_core::federation::{FederationConfig, Scenario};
use fedpet_core::model::ModelConfig;
use fedpet_core::optim::OptimizerConfig;

use crate::config::{AttackSetup, ExperimentConfig, MethodConfig, PartitionSpec, PretrainConfig, SCHEMA_VERSION};
use crate::error::{CliError, Result};

pub const PRESETS: &[&str] = &["main", "heterogeneity", "epochs", "cross-silo", "large-scale", "privacy"];

pub const FT_LR: f64 = 3e-4;
pub const PET_LR: f64 = 1e-3;

/// The five tuning methods with their Adam learning rates.
pub fn default_methods() -> Vec<MethodConfig> {
    [
        DeltaSpec::full(),
        DeltaSpec::adapter(8),
        DeltaSpec::lora(4, 8.0, &[LoraTarget::Q, LoraTarget::V]),
        DeltaSpec::bitfit(),
        DeltaSpec::prefix(4),
    ]
    .into_iter()
    .map(|delta| {
        let lr = if delta.is_full() { FT_LR } else { PET_LR };
        MethodConfig {
            delta,
            optimizer: OptimizerConfig::adam(lr),
        }
    })
    .collect()
}

fn base(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        name: name.to_string(),
        model: ModelConfig::default(),
        data: SyntheticSpec {
            n_examples: 2000,
            ..SyntheticSpec::default()
        },
        pretrain: PretrainConfig::default(),
        partitions: vec![PartitionSpec {
            alpha: 1.0,
            min_per_client: 10,
        }],
        federation: FederationConfig {
            total_clients: 10,
            sample_size: 10,
            rounds: 30,
            local_epochs: 1,
            batch_size: 32,
            // Per-method optimizers replace this one.
            optimizer: OptimizerConfig::adam(PET_LR),
            seed: 0,
            scenario: Scenario::Standard,
        },
        local_epochs: Vec::new(),
        methods: default_methods(),
        centralized: false,
        attack: None,
        output_dir: PathBuf::from("runs").join(name),
        seed: 0,
        repeat: 3,
    }
}

fn attack_setup() -> AttackSetup {
    AttackSetup {
        model: ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_positions: 8,
            dropout: 0.0,
            ..ModelConfig::default()
        },
        seq_len: 4,
        batch_sizes: vec![1, 4],
        methods: vec![
            DeltaSpec::full(),
            DeltaSpec::adapter(8),
            DeltaSpec::lora(4, 8.0, &[LoraTarget::Q, LoraTarget::V]),
            DeltaSpec::bitfit(),
            DeltaSpec::prefix(4),
        ],
        trials: 10,
        optimizer: OptimizerConfig::sgd(0.1),
        local_steps: 1,
        dlg: AttackConfig::default(),
    }
}

/// A fully resolved configuration for `name`.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let mut cfg = base(name);
    match name {
        "main" => cfg.centralized = true,
        "heterogeneity" => {
            cfg.partitions = [0.1, 1.0, 10.0]
                .into_iter()
                .map(|alpha| PartitionSpec {
                    alpha,
                    min_per_client: 10,
                })
                .collect();
        }
        "epochs" => cfg.local_epochs = vec![1, 3, 5],
        "cross-silo" => cfg.federation.scenario = Scenario::CrossSilo,
        "large-scale" => {
            cfg.data.n_examples = 10_000;
            cfg.partitions[0].min_per_client = 2;
            cfg.federation.total_clients = 1000;
            cfg.federation.sample_size = 10;
            cfg.federation.scenario = Scenario::LargeScale;
        }
        "privacy" => {
            cfg.methods.truncate(1);
            cfg.partitions.clear();
            cfg.attack = Some(attack_setup());
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(cfg.name, *name);
        }
    }

    #[test]
    fn federation_shapes() {
        let f = preset("cross-silo").unwrap().federation;
        assert_eq!((f.total_clients, f.sample_size), (10, 10));
        let f = preset("large-scale").unwrap().federation;
        assert_eq!((f.total_clients, f.sample_size), (1000, 10));
        assert_eq!(preset("heterogeneity").unwrap().partitions.len(), 3);
        assert_eq!(preset("epochs").unwrap().epoch_grid(), vec![1, 3, 5]);
    }

    #[test]
    fn main_has_five_methods_and_pooled_training() {
        let cfg = preset("main").unwrap();
        assert_eq!(cfg.methods.len(), 5);
        assert!(cfg.centralized);
        assert_eq!(cfg.federation.rounds, 30);
    }

    #[test]
    fn unknown_name_is_a_config_error() {
        assert!(matches!(preset("nope"), Err(CliError::Config(_))));
    }
}
