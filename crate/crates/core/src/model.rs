//! Small post-layer-norm transformer encoder classifier.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use fedpet_autodiff::{AttentionLayout, Precision, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::delta::{self, DeltaMethod, DeltaSpec, DeltaState};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng;
use crate::train;

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_positions: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_labels: usize,
    pub dropout: f64,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            max_positions: 32,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            n_labels: 3,
            dropout: 0.1,
            precision: Precision::F64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_labels", self.n_labels),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Every backbone tensor of `config` with its shape and init rule, in build order.
pub fn param_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d_model;
    let mut out = vec![
        ("emb.word".to_string(), vec![config.vocab_size, d], Init::Normal),
        ("emb.pos".to_string(), vec![config.max_positions, d], Init::Normal),
        ("emb.ln.g".to_string(), vec![d], Init::Ones),
        ("emb.ln.b".to_string(), vec![d], Init::Zeros),
    ];
    for i in 0..config.n_layers {
        for p in ["q", "k", "v", "o"] {
            out.push((format!("layer.{i}.attn.{p}.w"), vec![d, d], Init::Normal));
            out.push((format!("layer.{i}.attn.{p}.b"), vec![d], Init::Zeros));
        }
        out.push((format!("layer.{i}.attn.ln.g"), vec![d], Init::Ones));
        out.push((format!("layer.{i}.attn.ln.b"), vec![d], Init::Zeros));
        out.push((format!("layer.{i}.ffn.in.w"), vec![d, config.d_ff], Init::Normal));
        out.push((format!("layer.{i}.ffn.in.b"), vec![config.d_ff], Init::Zeros));
        out.push((format!("layer.{i}.ffn.out.w"), vec![config.d_ff, d], Init::Normal));
        out.push((format!("layer.{i}.ffn.out.b"), vec![d], Init::Zeros));
        out.push((format!("layer.{i}.ffn.ln.g"), vec![d], Init::Ones));
        out.push((format!("layer.{i}.ffn.ln.b"), vec![d], Init::Zeros));
    }
    out.extend(head_specs(config));
    out
}

fn head_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d_model;
    vec![
        ("head.dense.w".to_string(), vec![d, d], Init::Normal),
        ("head.dense.b".to_string(), vec![d], Init::Zeros),
        ("head.out.w".to_string(), vec![d, config.n_labels], Init::Normal),
        ("head.out.b".to_string(), vec![config.n_labels], Init::Zeros),
    ]
}

pub fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

/// Draws a tensor from a normal truncated at two standard deviations.
pub(crate) fn truncated_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut v = Vec::with_capacity(n);
    while v.len() < n {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            v.push(z * std);
        }
    }
    Ok(Tensor::new(shape.to_vec(), v)?)
}

fn init_tensor(rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Result<Tensor> {
    match init {
        Init::Normal => truncated_normal(rng, shape, INIT_STD),
        Init::Zeros => Ok(Tensor::zeros(shape.to_vec())),
        Init::Ones => Ok(Tensor::full(shape.to_vec(), 1.0)),
    }
}

/// Named backbone tensors with per-name trainable flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
    trainable: BTreeSet<String>,
}

impl ParameterStore {
    /// Assembles a store from explicit tensors; names and shapes must follow the scheme.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (name, shape, _) in &specs {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "{name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("missing tensor {name}"))),
            }
        }
        Ok(ParameterStore {
            config,
            tensors,
            trainable: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Input(format!("no parameter named {name}")))
    }

    /// Overwrites a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Input(format!("no parameter named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Input(format!(
                "{name}: shape {:?} does not match {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn set_trainable(&mut self, name: &str, flag: bool) -> Result<()> {
        if !self.tensors.contains_key(name) {
            return Err(Error::Input(format!("no parameter named {name}")));
        }
        if flag {
            self.trainable.insert(name.to_string());
        } else {
            self.trainable.remove(name);
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.trainable.clear();
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(String::as_str)
    }

    /// Bitwise equality of every tensor.
    pub fn bits_eq(&self, other: &ParameterStore) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, x), (b, y))| a == b && x.bits_eq(y))
    }

    /// Re-draws the classification head from `seed`.
    pub fn reset_head(&mut self, seed: u64) -> Result<()> {
        let mut r = rng::stream(seed, &[rng::HEAD]);
        for (name, shape, init) in head_specs(&self.config) {
            let t = init_tensor(&mut r, &shape, init)?;
            self.set(&name, t)?;
        }
        Ok(())
    }
}

/// Builds a freshly initialized, fully frozen store.
pub fn build(config: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    config.validate()?;
    let mut r = rng::stream(seed, &[rng::INIT]);
    let mut tensors = BTreeMap::new();
    for (name, shape, init) in param_specs(config) {
        tensors.insert(name, init_tensor(&mut r, &shape, init)?);
    }
    Ok(ParameterStore {
        config: config.clone(),
        tensors,
        trainable: BTreeSet::new(),
    })
}

/// A padded batch; rows are sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    /// Row-major `[batch_size × seq_len]`.
    pub token_ids: Vec<usize>,
    pub labels: Vec<usize>,
    /// True at padding positions.
    pub pad_mask: Vec<bool>,
}

pub const PAD: usize = 0;

impl Batch {
    /// Pads every sequence with [`PAD`] up to `seq_len`.
    pub fn from_sequences(seqs: &[&[usize]], labels: &[usize], seq_len: usize) -> Result<Self> {
        if seqs.is_empty() || seqs.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} sequences with {} labels",
                seqs.len(),
                labels.len()
            )));
        }
        let mut token_ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut pad_mask = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            if s.is_empty() || s.len() > seq_len {
                return Err(Error::Input(format!(
                    "sequence length {} outside [1, {seq_len}]",
                    s.len()
                )));
            }
            token_ids.extend_from_slice(s);
            token_ids.extend(std::iter::repeat_n(PAD, seq_len - s.len()));
            pad_mask.extend(std::iter::repeat_n(false, s.len()));
            pad_mask.extend(std::iter::repeat_n(true, seq_len - s.len()));
        }
        Ok(Batch {
            batch_size: seqs.len(),
            seq_len,
            token_ids,
            labels: labels.to_vec(),
            pad_mask,
        })
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let n = self.batch_size * self.seq_len;
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if self.token_ids.len() != n || self.pad_mask.len() != n {
            return Err(Error::Input("batch buffers do not match its extents".into()));
        }
        if self.labels.len() != self.batch_size {
            return Err(Error::Input("one label per row required".into()));
        }
        if self.seq_len > config.max_positions {
            return Err(Error::Input(format!(
                "sequence length {} exceeds {} positions",
                self.seq_len, config.max_positions
            )));
        }
        if let Some(t) = self.token_ids.iter().find(|&&t| t >= config.vocab_size) {
            return Err(Error::Input(format!("token id {t} out of range")));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= config.n_labels) {
            return Err(Error::Input(format!("label {l} out of range")));
        }
        Ok(())
    }

    pub fn real_mask(&self) -> Vec<bool> {
        self.pad_mask.iter().map(|p| !p).collect()
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.token_ids[b * self.seq_len..(b + 1) * self.seq_len]
    }
}

/// What the encoder reads.
pub enum Input<'a> {
    Tokens(&'a Batch),
    /// Precomputed word embeddings `[batch*seq, d]`; `mask` is true at real tokens.
    Embeddings {
        word: Var,
        mask: &'a [bool],
        batch: usize,
        seq: usize,
    },
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Tape handles for the parameters of one forward pass.
///
/// Trainable backbone tensors and all delta tensors are registered as named
/// parameters; frozen tensors become constants on first use.
pub struct Bindings<'s> {
    store: &'s ParameterStore,
    delta: Option<&'s DeltaState>,
    vars: HashMap<String, Var>,
}

impl<'s> Bindings<'s> {
    pub fn new(tape: &mut Tape, store: &'s ParameterStore, delta: Option<&'s DeltaState>) -> Result<Self> {
        let mut vars = HashMap::new();
        for name in store.trainable_names() {
            let v = tape.param(name, store.tensor(name)?.clone())?;
            vars.insert(name.to_string(), v);
        }
        if let Some(d) = delta {
            for (name, t) in d.tensors() {
                let v = tape.param(name, t.clone())?;
                vars.insert(name.to_string(), v);
            }
        }
        Ok(Bindings { store, delta, vars })
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = match self.store.get(name) {
            Some(t) => t.clone(),
            None => return Err(Error::Contract(format!("no tensor named {name}"))),
        };
        let v = tape.constant(t);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }
}

fn linear(tape: &mut Tape, p: &mut Bindings<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w = p.get(tape, &format!("{prefix}.w"))?;
    let b = p.get(tape, &format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    let rng = match mode {
        Mode::Train(r) if rate > 0.0 => r,
        _ => return Ok(x),
    };
    let shape = tape.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - rate);
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    Ok(tape.mul(x, m)?)
}

/// Query/key/value/output projection, with the LoRA update folded in when targeted.
fn projection(
    tape: &mut Tape,
    p: &mut Bindings<'_>,
    x: Var,
    layer: usize,
    which: delta::LoraTarget,
) -> Result<Var> {
    let base = format!("layer.{layer}.attn.{}", which.as_str());
    let mut w = p.get(tape, &format!("{base}.w"))?;
    if let Some(DeltaMethod::Lora {
        rank,
        scaling,
        targets,
    }) = p.delta.map(|d| &d.spec().method)
    {
        if targets.contains(&which) {
            let (rank, scaling) = (*rank, *scaling);
            let a = p.get(tape, &delta::lora_name(layer, which, "a"))?;
            let b = p.get(tape, &delta::lora_name(layer, which, "b"))?;
            debug_assert_eq!(tape.value(a).shape()[0], rank);
            w = delta::lora_effective_weight(tape, w, a, b, scaling)?;
        }
    }
    let bias = p.get(tape, &format!("{base}.b"))?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, bias)?)
}

fn maybe_adapter(
    tape: &mut Tape,
    p: &mut Bindings<'_>,
    h: Var,
    layer: usize,
    site: &str,
) -> Result<Var> {
    if !matches!(p.delta.map(|d| &d.spec().method), Some(DeltaMethod::Adapter { .. })) {
        return Ok(h);
    }
    let wd = p.get(tape, &delta::adapter_name(layer, site, "down", "w"))?;
    let bd = p.get(tape, &delta::adapter_name(layer, site, "down", "b"))?;
    let wu = p.get(tape, &delta::adapter_name(layer, site, "up", "w"))?;
    let bu = p.get(tape, &delta::adapter_name(layer, site, "up", "b"))?;
    delta::adapter_forward(tape, h, wd, bd, wu, bu)
}

fn encoder_layer(
    tape: &mut Tape,
    p: &mut Bindings<'_>,
    x: Var,
    layer: usize,
    layout: AttentionLayout<'_>,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    use delta::LoraTarget as T;
    let rate = p.store.config().dropout;
    let q = projection(tape, p, x, layer, T::Q)?;
    let k = projection(tape, p, x, layer, T::K)?;
    let v = projection(tape, p, x, layer, T::V)?;
    let prefix = if matches!(p.delta.map(|d| &d.spec().method), Some(DeltaMethod::Prefix { .. })) {
        let pk = p.get(tape, &delta::prefix_name(layer, "k"))?;
        let pv = p.get(tape, &delta::prefix_name(layer, "v"))?;
        Some((pk, pv))
    } else {
        None
    };
    let a = delta::prefix_attention(tape, q, k, v, prefix, layout)?;
    let o = projection(tape, p, a, layer, T::O)?;
    let o = dropout(tape, o, rate, mode)?;
    let o = maybe_adapter(tape, p, o, layer, "attn")?;
    let x = tape.add(x, o)?;
    let g = p.get(tape, &format!("layer.{layer}.attn.ln.g"))?;
    let b = p.get(tape, &format!("layer.{layer}.attn.ln.b"))?;
    let x = tape.layer_norm(x, g, b, LN_EPS)?;

    let f = linear(tape, p, x, &format!("layer.{layer}.ffn.in"))?;
    let f = tape.gelu(f)?;
    let f = linear(tape, p, f, &format!("layer.{layer}.ffn.out"))?;
    let f = dropout(tape, f, rate, mode)?;
    let f = maybe_adapter(tape, p, f, layer, "ffn")?;
    let x = tape.add(x, f)?;
    let g = p.get(tape, &format!("layer.{layer}.ffn.ln.g"))?;
    let b = p.get(tape, &format!("layer.{layer}.ffn.ln.b"))?;
    Ok(tape.layer_norm(x, g, b, LN_EPS)?)
}

/// Records the forward pass on `tape` and returns the `[batch × n_labels]` logits.
pub fn forward(
    tape: &mut Tape,
    p: &mut Bindings<'_>,
    input: Input<'_>,
    mut mode: Mode<'_>,
) -> Result<Var> {
    let config = p.store.config().clone();
    let owned_mask;
    let (word, mask, batch, seq) = match input {
        Input::Tokens(b) => {
            b.validate(&config)?;
            let table = p.get(tape, "emb.word")?;
            let w = tape.gather(table, &b.token_ids)?;
            owned_mask = b.real_mask();
            (w, owned_mask.as_slice(), b.batch_size, b.seq_len)
        }
        Input::Embeddings {
            word,
            mask,
            batch,
            seq,
        } => {
            if seq > config.max_positions || mask.len() != batch * seq {
                return Err(Error::Input(format!(
                    "embedding input {batch}x{seq} does not fit the model"
                )));
            }
            (word, mask, batch, seq)
        }
    };
    if let Some(d) = p.delta {
        if let DeltaMethod::Prefix { length } = d.spec().method {
            if length + seq > 2 * config.max_positions {
                return Err(Error::Input("prefix plus sequence too long".into()));
            }
        }
    }
    let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let pos_table = p.get(tape, "emb.pos")?;
    let pos = tape.gather(pos_table, &pos_ids)?;
    let x = tape.add(word, pos)?;
    let g = p.get(tape, "emb.ln.g")?;
    let b = p.get(tape, "emb.ln.b")?;
    let x = tape.layer_norm(x, g, b, LN_EPS)?;
    let mut x = dropout(tape, x, config.dropout, &mut mode)?;
    let layout = AttentionLayout {
        batch,
        seq,
        heads: config.n_heads,
        mask,
    };
    for i in 0..config.n_layers {
        x = encoder_layer(tape, p, x, i, layout, &mut mode)?;
    }
    let pooled = tape.mean_pool(x, mask, batch, seq)?;
    let h = linear(tape, p, pooled, "head.dense")?;
    let h = tape.tanh(h)?;
    linear(tape, p, h, "head.out")
}

/// Eval-mode logits as a plain tensor.
pub fn predict(store: &ParameterStore, delta: Option<&DeltaState>, batch: &Batch) -> Result<Tensor> {
    let mut tape = Tape::with_precision(store.config().precision);
    let mut p = Bindings::new(&mut tape, store, delta)?;
    let logits = forward(&mut tape, &mut p, Input::Tokens(batch), Mode::Eval)?;
    Ok(tape.value(logits).clone())
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let n = logits.shape()[1];
    logits
        .data()
        .chunks(n)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Pretrains every parameter with Adam on `pretext`, returning a frozen store.
pub fn pretrain_backbone(
    store: &ParameterStore,
    pretext: &crate::data::Dataset,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<ParameterStore> {
    let mut out = store.clone();
    out.freeze_all();
    if steps == 0 {
        return Ok(out);
    }
    if pretext.is_empty() {
        return Err(Error::Input("pretext dataset is empty".into()));
    }
    let mut state = delta::attach(&mut out, &DeltaSpec::full(), seed)?;
    let mut opt = Optimizer::new(OptimizerConfig::adam(lr));
    let mut r = rng::stream(seed, &[rng::PRETRAIN]);
    let batch_size = 32.min(pretext.len());
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..steps {
        if order.len() < batch_size {
            let mut fresh: Vec<usize> = (0..pretext.len()).collect();
            fresh.shuffle(&mut r);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..batch_size).collect();
        let batch = pretext.batch(&idx)?;
        train::train_step(&mut out, &mut state, &batch, &mut opt, &mut r)?;
    }
    out.freeze_all();
    Ok(out)
}
