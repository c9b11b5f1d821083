//! Parameter-efficient tuning methods layered over a frozen backbone.
//!
//! Delta tensors live under the `delta.` namespace so they never collide with
//! backbone names. A [`Payload`] is the efficient set exchanged with the server:
//! delta tensors plus trainable backbone tensors, in lexicographic order.

use std::collections::BTreeMap;
use std::fmt;

use fedpet_autodiff::{AttentionLayout, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ParameterStore};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
}

impl LoraTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            LoraTarget::Q => "q",
            LoraTarget::K => "k",
            LoraTarget::V => "v",
            LoraTarget::O => "o",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum DeltaMethod {
    FullFt,
    Adapter {
        reduction_factor: usize,
    },
    Lora {
        rank: usize,
        scaling: f64,
        targets: Vec<LoraTarget>,
    },
    BitFit,
    Prefix {
        length: usize,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSpec {
    #[serde(flatten)]
    pub method: DeltaMethod,
    #[serde(default = "yes")]
    pub head_trainable: bool,
}

impl DeltaSpec {
    pub fn new(method: DeltaMethod) -> Self {
        DeltaSpec {
            method,
            head_trainable: true,
        }
    }

    pub fn full() -> Self {
        Self::new(DeltaMethod::FullFt)
    }

    pub fn adapter(reduction_factor: usize) -> Self {
        Self::new(DeltaMethod::Adapter { reduction_factor })
    }

    pub fn lora(rank: usize, scaling: f64, targets: &[LoraTarget]) -> Self {
        Self::new(DeltaMethod::Lora {
            rank,
            scaling,
            targets: targets.to_vec(),
        })
    }

    pub fn bitfit() -> Self {
        Self::new(DeltaMethod::BitFit)
    }

    pub fn prefix(length: usize) -> Self {
        Self::new(DeltaMethod::Prefix { length })
    }

    /// Short method name used in reports.
    pub fn label(&self) -> &'static str {
        match self.method {
            DeltaMethod::FullFt => "FT",
            DeltaMethod::Adapter { .. } => "Adapter",
            DeltaMethod::Lora { .. } => "LoRA",
            DeltaMethod::BitFit => "BitFit",
            DeltaMethod::Prefix { .. } => "Prefix",
        }
    }

    pub fn is_full(&self) -> bool {
        self.method == DeltaMethod::FullFt
    }

    /// Adapter bottleneck width for `d_model`.
    pub fn bottleneck(d_model: usize, reduction_factor: usize) -> usize {
        (d_model / reduction_factor).max(1)
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        match &self.method {
            DeltaMethod::FullFt | DeltaMethod::BitFit => Ok(()),
            DeltaMethod::Adapter { reduction_factor } if *reduction_factor == 0 => {
                Err(Error::Config("adapter reduction factor must be at least 1".into()))
            }
            DeltaMethod::Adapter { .. } => Ok(()),
            DeltaMethod::Lora {
                rank,
                scaling,
                targets,
            } => {
                if *rank == 0 || *rank >= config.d_model {
                    return Err(Error::Config(format!(
                        "LoRA rank {rank} must lie in [1, {})",
                        config.d_model
                    )));
                }
                if !scaling.is_finite() {
                    return Err(Error::Config("LoRA scaling must be finite".into()));
                }
                let mut t = targets.clone();
                t.sort();
                t.dedup();
                if t.is_empty() || t.len() != targets.len() {
                    return Err(Error::Config(
                        "LoRA targets must be a non-empty set of distinct projections".into(),
                    ));
                }
                Ok(())
            }
            DeltaMethod::Prefix { length } => {
                if *length == 0 || *length > config.max_positions / 2 {
                    return Err(Error::Config(format!(
                        "prefix length {length} must lie in [1, {}]",
                        config.max_positions / 2
                    )));
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for DeltaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.method {
            DeltaMethod::FullFt => write!(f, "FT"),
            DeltaMethod::Adapter { reduction_factor } => write!(f, "Adapter(rf={reduction_factor})"),
            DeltaMethod::Lora {
                rank,
                scaling,
                targets,
            } => {
                let t: Vec<&str> = targets.iter().map(|t| t.as_str()).collect();
                write!(f, "LoRA(r={rank},s={scaling},{})", t.join(""))
            }
            DeltaMethod::BitFit => write!(f, "BitFit"),
            DeltaMethod::Prefix { length } => write!(f, "Prefix(len={length})"),
        }
    }
}

pub fn adapter_name(layer: usize, site: &str, proj: &str, part: &str) -> String {
    format!("delta.layer.{layer}.adapter.{site}.{proj}.{part}")
}

pub fn lora_name(layer: usize, target: LoraTarget, part: &str) -> String {
    format!("delta.layer.{layer}.lora.{}.{part}", target.as_str())
}

pub fn prefix_name(layer: usize, part: &str) -> String {
    format!("delta.layer.{layer}.prefix.{part}")
}

/// Whether `name` is a bias term for bias-only tuning: every `.b`, including layer-norm beta.
pub fn is_bias(name: &str) -> bool {
    name.ends_with(".b")
}

/// Tensors a method adds, plus the backbone names it trains.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaState {
    spec: DeltaSpec,
    tensors: BTreeMap<String, Tensor>,
    trainable_backbone: Vec<String>,
}

impl DeltaState {
    pub fn spec(&self) -> &DeltaSpec {
        &self.spec
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(t) if t.shape() == value.shape() => {
                *t = value;
                Ok(())
            }
            Some(t) => Err(Error::Input(format!(
                "{name}: shape {:?} does not match {:?}",
                value.shape(),
                t.shape()
            ))),
            None => Err(Error::Input(format!("no delta tensor named {name}"))),
        }
    }

    pub fn trainable_backbone(&self) -> &[String] {
        &self.trainable_backbone
    }

    /// Names of the efficient set, sorted.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .tensors
            .keys()
            .cloned()
            .chain(self.trainable_backbone.iter().cloned())
            .collect();
        v.sort();
        v
    }
}

/// Attaches `spec` to `store`: sets the store's trainable flags and creates the method's tensors.
pub fn attach(store: &mut ParameterStore, spec: &DeltaSpec, seed: u64) -> Result<DeltaState> {
    let config = store.config().clone();
    spec.validate(&config)?;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let trainable_backbone: Vec<String> = names
        .into_iter()
        .filter(|n| match spec.method {
            DeltaMethod::FullFt => true,
            DeltaMethod::BitFit => is_bias(n) || (spec.head_trainable && model::is_head(n)),
            _ => spec.head_trainable && model::is_head(n),
        })
        .collect();
    store.freeze_all();
    for n in &trainable_backbone {
        store.set_trainable(n, true)?;
    }

    let d = config.d_model;
    let mut r = rng::stream(seed, &[rng::DELTA]);
    let mut tensors = BTreeMap::new();
    match &spec.method {
        DeltaMethod::FullFt | DeltaMethod::BitFit => {}
        DeltaMethod::Adapter { reduction_factor } => {
            let m = DeltaSpec::bottleneck(d, *reduction_factor);
            for i in 0..config.n_layers {
                for site in ["attn", "ffn"] {
                    tensors.insert(
                        adapter_name(i, site, "down", "w"),
                        model::truncated_normal(&mut r, &[d, m], 0.02)?,
                    );
                    tensors.insert(adapter_name(i, site, "down", "b"), Tensor::zeros(vec![m]));
                    tensors.insert(adapter_name(i, site, "up", "w"), Tensor::zeros(vec![m, d]));
                    tensors.insert(adapter_name(i, site, "up", "b"), Tensor::zeros(vec![d]));
                }
            }
        }
        DeltaMethod::Lora { rank, targets, .. } => {
            let std = 1.0 / (d as f64).sqrt();
            let mut targets = targets.clone();
            targets.sort();
            for i in 0..config.n_layers {
                for &t in &targets {
                    let a: Vec<f64> = (0..rank * d)
                        .map(|_| r.sample::<f64, _>(StandardNormal) * std)
                        .collect();
                    tensors.insert(lora_name(i, t, "a"), Tensor::new(vec![*rank, d], a)?);
                    tensors.insert(lora_name(i, t, "b"), Tensor::zeros(vec![d, *rank]));
                }
            }
        }
        DeltaMethod::Prefix { length } => {
            for i in 0..config.n_layers {
                for part in ["k", "v"] {
                    tensors.insert(
                        prefix_name(i, part),
                        model::truncated_normal(&mut r, &[*length, d], 0.02)?,
                    );
                }
            }
        }
    }
    Ok(DeltaState {
        spec: spec.clone(),
        tensors,
        trainable_backbone,
    })
}

/// `h + up(relu(down(h)))`, with `down.w: [d, m]` and `up.w: [m, d]`.
pub fn adapter_forward(tape: &mut Tape, h: Var, wd: Var, bd: Var, wu: Var, bu: Var) -> Result<Var> {
    let z = tape.matmul(h, wd)?;
    let z = tape.add(z, bd)?;
    let z = tape.relu(z)?;
    let u = tape.matmul(z, wu)?;
    let u = tape.add(u, bu)?;
    Ok(tape.add(h, u)?)
}

/// `W + (scaling / r)·B·A` with `W: [d, k]`, `A: [r, k]`, `B: [d, r]`; `W` is detached.
pub fn lora_effective_weight(tape: &mut Tape, w: Var, a: Var, b: Var, scaling: f64) -> Result<Var> {
    let (d, k) = tape.value(w).dims2()?;
    let (r, ka) = tape.value(a).dims2()?;
    let (db, rb) = tape.value(b).dims2()?;
    if ka != k || db != d || rb != r || r >= d.min(k) {
        return Err(fedpet_autodiff::Error::Dimension {
            op: "lora_effective_weight",
            detail: format!("W {d}x{k}, A {r}x{ka}, B {db}x{rb}"),
        }
        .into());
    }
    let w = tape.detach(w);
    let ba = tape.matmul(b, a)?;
    let delta = tape.scale(ba, scaling / r as f64)?;
    Ok(tape.add(w, delta)?)
}

/// Attention over `[P_k; K]` and `[P_v; V]` per sequence; prefix rows are never masked.
pub fn prefix_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    prefix: Option<(Var, Var)>,
    layout: AttentionLayout<'_>,
) -> Result<Var> {
    Ok(tape.attention(q, k, v, prefix, layout)?)
}

/// The efficient parameter set exchanged between clients and server.
#[derive(Debug, Clone, PartialEq)]
pub struct Payload {
    entries: Vec<(String, Tensor)>,
}

impl Payload {
    /// Sorts entries by name; duplicate names are rejected.
    pub fn new(mut entries: Vec<(String, Tensor)>) -> Result<Self> {
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Payload(format!("duplicate entry {}", w[0].0)));
        }
        Ok(Payload { entries })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bits_eq(&self, other: &Payload) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.bits_eq(y))
    }

    /// Largest absolute elementwise difference; infinite when layouts differ.
    pub fn max_abs_diff(&self, other: &Payload) -> f64 {
        if !self.same_layout(other) {
            return f64::INFINITY;
        }
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|((_, x), (_, y))| x.max_abs_diff(y))
            .fold(0.0, f64::max)
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &Payload) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }
}

/// Exactly the trainable tensors, lexicographic by name.
pub fn extract_efficient(store: &ParameterStore, delta: &DeltaState) -> Result<Payload> {
    let mut entries: Vec<(String, Tensor)> = delta
        .tensors
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    for name in &delta.trainable_backbone {
        entries.push((name.clone(), store.tensor(name)?.clone()));
    }
    Payload::new(entries)
}

/// Overwrites the trainable tensors from `payload`; names and shapes must match exactly.
pub fn inject_efficient(store: &mut ParameterStore, delta: &mut DeltaState, payload: &Payload) -> Result<()> {
    let expected = delta.trainable_names();
    let got: Vec<&str> = payload.names().collect();
    if let Some(n) = got.iter().find(|n| expected.binary_search_by(|e| e.as_str().cmp(n)).is_err()) {
        return Err(Error::Payload(format!("unknown tensor {n}")));
    }
    if let Some(n) = expected.iter().find(|n| payload.get(n).is_none()) {
        return Err(Error::Payload(format!("missing tensor {n}")));
    }
    for (name, t) in payload.entries() {
        let current = match delta.tensors.get(name) {
            Some(c) => c,
            None => store.tensor(name)?,
        };
        if current.shape() != t.shape() {
            return Err(Error::Payload(format!(
                "{name}: shape {:?} does not match {:?}",
                t.shape(),
                current.shape()
            )));
        }
    }
    for (name, t) in payload.entries() {
        if let Some(slot) = delta.tensors.get_mut(name) {
            *slot = t.clone();
        } else {
            store.set(name, t.clone())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, predict, Batch};

    fn batch() -> Batch {
        Batch::from_sequences(&[&[3, 4, 5, 6], &[7, 8]], &[1, 0], 5).unwrap()
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn adapter_hand_example() {
        let mut tape = Tape::new();
        let h = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let wd = tape.constant(t(&[2, 1], &[1.0, 0.0]));
        let bd = tape.constant(t(&[1], &[0.0]));
        let wu = tape.constant(t(&[1, 2], &[2.0, 0.0]));
        let bu = tape.constant(t(&[2], &[0.0, 0.0]));
        let out = adapter_forward(&mut tape, h, wd, bd, wu, bu).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 0.0]);
    }

    #[test]
    fn lora_hand_example_and_zero_case() {
        let mut tape = Tape::new();
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.param("a", t(&[1, 2], &[0.0, 1.0])).unwrap();
        let b = tape.param("b", t(&[2, 1], &[1.0, 0.0])).unwrap();
        let out = lora_effective_weight(&mut tape, w, a, b, 1.0).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 1.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let w0 = t(&[3, 3], &[0.5, -1.0, 2.0, 0.25, 3.0, -0.75, 1.5, 0.0, 4.0]);
        let w = tape.constant(w0.clone());
        let a = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let b = tape.constant(Tensor::zeros(vec![3, 1]));
        let out = lora_effective_weight(&mut tape, w, a, b, 8.0).unwrap();
        assert!(tape.value(out).bits_eq(&w0));
    }

    #[test]
    fn lora_weight_gets_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::full(vec![3, 3], 0.5)).unwrap();
        let a = tape.param("a", t(&[1, 3], &[0.1, 0.2, 0.3])).unwrap();
        let b = tape.param("b", t(&[3, 1], &[0.4, -0.5, 0.6])).unwrap();
        let eff = lora_effective_weight(&mut tape, w, a, b, 2.0).unwrap();
        let sq = tape.mul(eff, eff).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get("w").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.get("a").unwrap().norm() > 0.0);
        assert!(g.get("b").unwrap().norm() > 0.0);
    }

    #[test]
    fn lora_rank_bound_enforced() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::zeros(vec![2, 2]));
        let a = tape.constant(Tensor::zeros(vec![2, 2]));
        let b = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(lora_effective_weight(&mut tape, w, a, b, 1.0).is_err());
    }

    #[test]
    fn zero_init_methods_leave_forward_unchanged() {
        let base = build(&ModelConfig::default(), 4).unwrap();
        let want = predict(&base, None, &batch()).unwrap();
        for spec in [
            DeltaSpec::lora(4, 8.0, &[LoraTarget::Q, LoraTarget::V]),
            DeltaSpec::adapter(8),
        ] {
            let mut s = base.clone();
            let d = attach(&mut s, &spec, 1).unwrap();
            let got = predict(&s, Some(&d), &batch()).unwrap();
            assert!(got.bits_eq(&want), "{spec}");
        }
    }

    #[test]
    fn bitfit_trains_biases_and_head() {
        let mut s = build(&ModelConfig::default(), 4).unwrap();
        let d = attach(&mut s, &DeltaSpec::bitfit(), 1).unwrap();
        let want: Vec<String> = s
            .names()
            .filter(|n| n.ends_with(".b") || n.starts_with("head."))
            .map(str::to_string)
            .collect();
        assert_eq!(d.trainable_names(), want);
        assert!(want.contains(&"layer.0.attn.ln.b".to_string()));
        assert!(!want.contains(&"layer.0.attn.ln.g".to_string()));
        assert!(s.trainable_names().eq(want.iter().map(String::as_str)));
    }

    #[test]
    fn full_extraction_is_whole_backbone() {
        let mut s = build(&ModelConfig::default(), 4).unwrap();
        let d = attach(&mut s, &DeltaSpec::full(), 1).unwrap();
        let p = extract_efficient(&s, &d).unwrap();
        assert_eq!(p.scalar_count(), s.scalar_count());
        assert!(p.names().eq(s.names()));
    }

    #[test]
    fn extract_inject_round_trip() {
        let mut s = build(&ModelConfig::default(), 4).unwrap();
        let mut d = attach(&mut s, &DeltaSpec::prefix(4), 1).unwrap();
        let p = extract_efficient(&s, &d).unwrap();
        let before = s.clone();
        inject_efficient(&mut s, &mut d, &p).unwrap();
        assert!(s.bits_eq(&before));
        assert!(extract_efficient(&s, &d).unwrap().bits_eq(&p));
    }

    #[test]
    fn inject_rejects_bad_payloads() {
        let mut s = build(&ModelConfig::default(), 4).unwrap();
        let mut d = attach(&mut s, &DeltaSpec::bitfit(), 1).unwrap();
        let p = extract_efficient(&s, &d).unwrap();

        let mut extra = p.entries().to_vec();
        extra.push(("layer.0.attn.q.w".into(), Tensor::zeros(vec![32, 32])));
        let extra = Payload::new(extra).unwrap();
        assert!(matches!(inject_efficient(&mut s, &mut d, &extra), Err(Error::Payload(_))));

        let missing = Payload::new(p.entries()[1..].to_vec()).unwrap();
        assert!(matches!(inject_efficient(&mut s, &mut d, &missing), Err(Error::Payload(_))));

        let mut bad = p.entries().to_vec();
        bad[0].1 = Tensor::zeros(vec![1]);
        let bad = Payload::new(bad).unwrap();
        assert!(matches!(inject_efficient(&mut s, &mut d, &bad), Err(Error::Payload(_))));
    }

    #[test]
    fn spec_validation() {
        let c = ModelConfig::default();
        assert!(DeltaSpec::lora(0, 8.0, &[LoraTarget::Q]).validate(&c).is_err());
        assert!(DeltaSpec::lora(2, 8.0, &[]).validate(&c).is_err());
        assert!(DeltaSpec::lora(2, 8.0, &[LoraTarget::Q, LoraTarget::Q]).validate(&c).is_err());
        assert!(DeltaSpec::prefix(17).validate(&c).is_err());
        assert!(DeltaSpec::prefix(16).validate(&c).is_ok());
        assert!(DeltaSpec::adapter(0).validate(&c).is_err());
        assert_eq!(DeltaSpec::bottleneck(32, 64), 1);
    }

    #[test]
    fn spec_json_shape() {
        let s = DeltaSpec::lora(8, 16.0, &[LoraTarget::Q, LoraTarget::V]);
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(
            j,
            r#"{"method":"lora","rank":8,"scaling":16.0,"targets":["q","v"],"head_trainable":true}"#
        );
        let back: DeltaSpec = serde_json::from_str(r#"{"method":"bit_fit"}"#).unwrap();
        assert_eq!(back, DeltaSpec::bitfit());
    }
}
