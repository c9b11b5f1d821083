//! Closed-form parameter and communication cost.
//!
//! MB is 10^6 bytes and GB is 10^9 bytes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::delta::{DeltaMethod, DeltaSpec};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchShape {
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Token-type embedding rows, 0 or 1.
    pub type_vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_labels: usize,
    /// Whether the classifier output projection counts toward the backbone.
    pub include_head: bool,
    #[serde(default = "four")]
    pub bytes_per_scalar: usize,
}

fn four() -> usize {
    4
}

impl ArchShape {
    pub fn roberta_base(n_labels: usize) -> Self {
        ArchShape {
            vocab_size: 50265,
            max_positions: 514,
            type_vocab: 1,
            d_model: 768,
            n_layers: 12,
            d_ff: 3072,
            n_labels,
            include_head: false,
            bytes_per_scalar: 4,
        }
    }

    /// The shape of a model built from `config`.
    pub fn from_model(config: &ModelConfig) -> Self {
        ArchShape {
            vocab_size: config.vocab_size,
            max_positions: config.max_positions,
            type_vocab: 0,
            d_model: config.d_model,
            n_layers: config.n_layers,
            d_ff: config.d_ff,
            n_labels: config.n_labels,
            include_head: true,
            bytes_per_scalar: 4,
        }
    }

    /// Word, position and type tables plus the embedding layer norm.
    pub fn embedding_count(&self) -> usize {
        let d = self.d_model;
        (self.vocab_size + self.max_positions + self.type_vocab) * d + 2 * d
    }

    /// One encoder layer: four projections, two layer norms, the two FFN linears.
    pub fn layer_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d
    }

    /// The dense layer in front of the classifier.
    pub fn dense_count(&self) -> usize {
        self.d_model * self.d_model + self.d_model
    }

    pub fn out_proj_count(&self) -> usize {
        self.d_model * self.n_labels + self.n_labels
    }

    pub fn head_count(&self) -> usize {
        self.dense_count() + self.out_proj_count()
    }

    /// Bias and layer-norm beta scalars outside the head.
    pub fn backbone_bias_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        d + self.n_layers * (4 * d + d + f + d + d)
    }
}

pub fn backbone_param_count(shape: &ArchShape) -> usize {
    let out = if shape.include_head {
        shape.out_proj_count()
    } else {
        0
    };
    shape.embedding_count() + shape.n_layers * shape.layer_count() + shape.dense_count() + out
}

pub fn trainable_param_count(shape: &ArchShape, spec: &DeltaSpec) -> usize {
    let d = shape.d_model;
    let l = shape.n_layers;
    let head = if spec.head_trainable {
        shape.head_count()
    } else {
        0
    };
    match &spec.method {
        DeltaMethod::FullFt => backbone_param_count(shape),
        DeltaMethod::BitFit => {
            let head_bias = if spec.head_trainable {
                0
            } else {
                d + shape.n_labels
            };
            shape.backbone_bias_count() + head_bias + head
        }
        DeltaMethod::Adapter { reduction_factor } => {
            let m = DeltaSpec::bottleneck(d, *reduction_factor);
            2 * l * (2 * d * m + d + m) + head
        }
        DeltaMethod::Lora { rank, targets, .. } => targets.len() * l * 2 * d * rank + head,
        DeltaMethod::Prefix { length } => l * 2 * length * d + head,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: String,
    pub trainable_scalars: usize,
    pub payload_bytes: usize,
    /// Upload plus download for all sampled clients.
    pub per_round_bytes: usize,
    pub total_bytes: usize,
    pub ratio_vs_full: f64,
}

/// Communication cost of `k` clients per round over `t` rounds.
pub fn comm_budget(spec: &DeltaSpec, shape: &ArchShape, k: usize, t: usize) -> CostReport {
    let bytes = shape.bytes_per_scalar;
    let trainable = trainable_param_count(shape, spec);
    let payload = trainable * bytes;
    let full = backbone_param_count(shape) * bytes;
    let per_round = 2 * k * payload;
    CostReport {
        method: spec.to_string(),
        trainable_scalars: trainable,
        payload_bytes: payload,
        per_round_bytes: per_round,
        total_bytes: t * per_round,
        ratio_vs_full: full as f64 / payload as f64,
    }
}

pub const COST_CSV_HEADER: &str = "method,trainable_scalars,payload_mb,ratio_vs_full,per_round_mb,total_gb";

/// Quotes `s` when it contains a comma or a quote.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn cost_csv(reports: &[CostReport]) -> String {
    let mut s = String::from(COST_CSV_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{:.2},{:.1},{:.2},{:.3}",
            csv_field(&r.method),
            r.trainable_scalars,
            r.payload_bytes as f64 / 1e6,
            r.ratio_vs_full,
            r.per_round_bytes as f64 / 1e6,
            r.total_bytes as f64 / 1e9
        );
    }
    s
}
