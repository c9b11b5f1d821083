//! Gradient inversion against captured client uploads.
//!
//! The attacker knows the model at capture time, the batch shape and which
//! positions are padding. It optimises continuous word embeddings and soft
//! label logits so that the update they would produce matches the captured
//! one, then decodes each row to its nearest vocabulary embedding. The outer
//! gradient is taken by central finite differences.

use std::collections::{BTreeMap, BTreeSet};

use fedpet_autodiff::{Tape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::delta::{extract_efficient, DeltaSpec, DeltaState};
use crate::error::{Error, Result};
use crate::model::{forward, Batch, Bindings, Input, Mode, ParameterStore};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng;
use crate::train::{apply, loss_and_gradients};

/// The word embedding table; its gradient is left out of the matching loss
/// because dummy inputs bypass it.
pub const WORD_TABLE: &str = "emb.word";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub max_iters: usize,
    pub attack_lr: f64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    pub restarts: usize,
    pub seed: u64,
}

fn default_fd_step() -> f64 {
    1e-3
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            max_iters: 200,
            attack_lr: 0.01,
            fd_step: default_fd_step(),
            restarts: 1,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.restarts == 0 || !(self.attack_lr > 0.0) || !(self.fd_step > 0.0) {
            return Err(Error::Config("attack settings must all be positive".into()));
        }
        Ok(())
    }
}

/// What the server saw.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    /// Gradient recovered from a single plain SGD step.
    Gradient(BTreeMap<String, Tensor>),
    /// Raw parameter change after `steps` optimizer steps.
    Delta {
        delta: BTreeMap<String, Tensor>,
        optimizer: OptimizerConfig,
        steps: usize,
    },
}

impl Observation {
    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        match self {
            Observation::Gradient(g) => g,
            Observation::Delta { delta, .. } => delta,
        }
    }

    pub fn is_multi_step(&self) -> bool {
        matches!(self, Observation::Delta { steps, .. } if *steps > 1)
    }
}

#[derive(Debug, Clone)]
pub struct AttackTarget {
    pub store: ParameterStore,
    pub delta: DeltaState,
    pub observed: Observation,
    /// Kept for scoring only.
    pub batch: Batch,
}

impl AttackTarget {
    pub fn spec(&self) -> &DeltaSpec {
        self.delta.spec()
    }
}

/// Runs `steps` local steps on `batch` (dropout off) and records what the upload reveals.
///
/// A single plain SGD step is converted to a gradient via `g = -Δ/lr`; any
/// other schedule keeps the raw change.
pub fn capture_update(
    store: &ParameterStore,
    delta: &DeltaState,
    batch: &Batch,
    optimizer: OptimizerConfig,
    steps: usize,
) -> Result<AttackTarget> {
    if steps == 0 {
        return Err(Error::Capture("at least one local step is required".into()));
    }
    if batch.batch_size == 0 {
        return Err(Error::Capture("empty batch".into()));
    }
    let before = extract_efficient(store, delta)?;
    let (s, d) = simulate(store, delta, batch, optimizer, steps)?;
    let after = extract_efficient(&s, &d)?;
    let change: BTreeMap<String, Tensor> = before
        .entries()
        .iter()
        .zip(after.entries())
        .map(|((n, a), (_, b))| {
            let v: Vec<f64> = b.data().iter().zip(a.data()).map(|(x, y)| x - y).collect();
            Ok((n.clone(), Tensor::new(a.shape().to_vec(), v)?))
        })
        .collect::<Result<_>>()?;
    let observed = match optimizer {
        OptimizerConfig::Sgd { lr, .. } if steps == 1 => {
            if lr <= 0.0 {
                return Err(Error::Capture("learning rate 0 hides the gradient".into()));
            }
            let g = change
                .into_iter()
                .map(|(n, t)| Ok((n, t.map(|v| -v / lr)?)))
                .collect::<Result<_>>()?;
            Observation::Gradient(g)
        }
        _ => Observation::Delta {
            delta: change,
            optimizer,
            steps,
        },
    };
    Ok(AttackTarget {
        store: store.clone(),
        delta: delta.clone(),
        observed,
        batch: batch.clone(),
    })
}

fn simulate(
    store: &ParameterStore,
    delta: &DeltaState,
    batch: &Batch,
    optimizer: OptimizerConfig,
    steps: usize,
) -> Result<(ParameterStore, DeltaState)> {
    let mut s = store.clone();
    let mut d = delta.clone();
    let mut opt = Optimizer::new(optimizer);
    for _ in 0..steps {
        let (_, g) = loss_and_gradients(&s, &d, batch, Mode::Eval)?;
        apply(&mut s, &mut d, &g, &mut opt)?;
    }
    Ok((s, d))
}

/// Token ids whose embedding rows received a nonzero update.
pub fn embedding_grad_leak(target: &AttackTarget) -> Result<BTreeSet<usize>> {
    let t = target
        .observed
        .tensors()
        .get(WORD_TABLE)
        .ok_or(Error::LeakUnavailable)?;
    let (rows, cols) = t.dims2()?;
    Ok((0..rows)
        .filter(|&r| {
            let row = &t.data()[r * cols..(r + 1) * cols];
            row.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-12
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub method: String,
    pub batch_size: usize,
    pub seed: u64,
    pub iterations: usize,
    pub final_loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Decoded token ids per example (real positions only).
    pub recovered: Vec<Vec<usize>>,
}

/// Multiset precision, recall and F1.
pub fn prf_metrics(recovered: &[usize], target: &[usize]) -> (f64, f64, f64) {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &t in recovered {
        counts.entry(t).or_default().0 += 1;
    }
    for &t in target {
        counts.entry(t).or_default().1 += 1;
    }
    let hit: usize = counts.values().map(|(a, b)| a.min(b)).sum::<usize>();
    let p = if recovered.is_empty() {
        0.0
    } else {
        hit as f64 / recovered.len() as f64
    };
    let r = if target.is_empty() {
        0.0
    } else {
        hit as f64 / target.len() as f64
    };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe)?;
        probe[i] = x[i] - step;
        let down = f(&probe)?;
        probe[i] = x[i];
        g.push((up - down) / (2.0 * step));
    }
    Ok(g)
}

/// Evaluates the matching loss for dummy inputs of one target.
struct Matcher<'a> {
    target: &'a AttackTarget,
    mask: Vec<bool>,
    rows: usize,
    d: usize,
    n_labels: usize,
}

impl<'a> Matcher<'a> {
    fn new(target: &'a AttackTarget) -> Self {
        let c = target.store.config();
        Matcher {
            target,
            mask: target.batch.real_mask(),
            rows: target.batch.batch_size * target.batch.seq_len,
            d: c.d_model,
            n_labels: c.n_labels,
        }
    }

    fn dim(&self) -> usize {
        self.rows * self.d + self.target.batch.batch_size * self.n_labels
    }

    /// Trainable-set gradient of the soft-label loss at dummy point `x`.
    fn dummy_gradients(&self, store: &ParameterStore, delta: &DeltaState, x: &[f64]) -> Result<fedpet_autodiff::GradientMap> {
        let b = self.target.batch.batch_size;
        let split = self.rows * self.d;
        let mut tape = Tape::with_precision(store.config().precision);
        let mut p = Bindings::new(&mut tape, store, Some(delta))?;
        let word = tape.constant(Tensor::new(vec![self.rows, self.d], x[..split].to_vec())?);
        let logits = forward(
            &mut tape,
            &mut p,
            Input::Embeddings {
                word,
                mask: &self.mask,
                batch: b,
                seq: self.target.batch.seq_len,
            },
            Mode::Eval,
        )?;
        let soft = softmax_rows(&x[split..], self.n_labels);
        let targets = Tensor::new(vec![b, self.n_labels], soft)?;
        let loss = tape.cross_entropy_soft(logits, &targets)?;
        Ok(tape.backward(loss)?)
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        let t = self.target;
        let dummy: BTreeMap<String, Tensor> = match &t.observed {
            Observation::Gradient(_) => self
                .dummy_gradients(&t.store, &t.delta, x)?
                .iter()
                .map(|(n, g)| (n.to_string(), g.clone()))
                .collect(),
            Observation::Delta {
                optimizer, steps, ..
            } => {
                let before = extract_efficient(&t.store, &t.delta)?;
                let mut s = t.store.clone();
                let mut d = t.delta.clone();
                let mut opt = Optimizer::new(*optimizer);
                for _ in 0..*steps {
                    let g = self.dummy_gradients(&s, &d, x)?;
                    apply(&mut s, &mut d, &g, &mut opt)?;
                }
                let after = extract_efficient(&s, &d)?;
                before
                    .entries()
                    .iter()
                    .zip(after.entries())
                    .map(|((n, a), (_, b))| {
                        let v: Vec<f64> = b.data().iter().zip(a.data()).map(|(x, y)| x - y).collect();
                        Ok((n.clone(), Tensor::new(a.shape().to_vec(), v)?))
                    })
                    .collect::<Result<_>>()?
            }
        };
        let mut total = 0.0;
        for (name, obs) in t.observed.tensors() {
            if name == WORD_TABLE {
                continue;
            }
            let got = dummy
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no dummy gradient for {name}")))?;
            total += got
                .data()
                .iter()
                .zip(obs.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        Ok(total)
    }
}

fn softmax_rows(logits: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

/// Nearest row of `table` by Euclidean distance; ties go to the lowest id.
pub fn nearest_token(table: &Tensor, row: &[f64]) -> usize {
    let cols = row.len();
    let mut best = (0, f64::INFINITY);
    for (id, t) in table.data().chunks(cols).enumerate() {
        let dist: f64 = t.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best.1 {
            best = (id, dist);
        }
    }
    best.0
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-12).sqrt();
    for x in v.iter_mut() {
        *x = (*x - mean) * inv;
    }
}

/// Decodes a dummy row at a position. The encoder only sees the normalised
/// sum of word and position vectors, so rows are compared after that map.
pub fn decode_row(table: &Tensor, pos: &[f64], row: &[f64]) -> usize {
    let norm = |w: &[f64]| {
        let mut v: Vec<f64> = w.iter().zip(pos).map(|(a, b)| a + b).collect();
        standardize(&mut v);
        v
    };
    let cols = row.len();
    let keys: Vec<f64> = table.data().chunks(cols).flat_map(norm).collect();
    let keys = Tensor::new(vec![table.len() / cols, cols], keys).expect("same extents");
    nearest_token(&keys, &norm(row))
}

struct Run {
    x: Vec<f64>,
    loss: f64,
    iterations: usize,
}

/// Adam on the finite-difference gradient. The best iterate seen is kept.
fn descend(m: &Matcher<'_>, x0: Vec<f64>, cfg: &AttackConfig) -> Result<Run> {
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-12);
    let mut x = x0;
    let mut loss = m.loss(&x)?;
    let mut best = Run {
        x: x.clone(),
        loss,
        iterations: 0,
    };
    let mut mom = vec![0.0; x.len()];
    let mut vel = vec![0.0; x.len()];
    for it in 1..=cfg.max_iters {
        if loss == 0.0 {
            break;
        }
        let g = fd_gradient(|p| m.loss(p), &x, cfg.fd_step)?;
        if g.iter().any(|v| !v.is_finite()) {
            break;
        }
        let (c1, c2) = (1.0 - b1.powi(it as i32), 1.0 - b2.powi(it as i32));
        for i in 0..x.len() {
            mom[i] = b1 * mom[i] + (1.0 - b1) * g[i];
            vel[i] = b2 * vel[i] + (1.0 - b2) * g[i] * g[i];
            x[i] -= cfg.attack_lr * (mom[i] / c1) / ((vel[i] / c2).sqrt() + eps);
        }
        loss = m.loss(&x)?;
        best.iterations = it;
        if loss < best.loss {
            best.x.clone_from(&x);
            best.loss = loss;
        }
    }
    Ok(best)
}

/// Reconstructs the captured batch starting from `start`, or from random
/// points when `start` is `None`, and scores the decoded tokens.
pub fn dlg_reconstruct_from(target: &AttackTarget, cfg: &AttackConfig, start: Option<Vec<f64>>) -> Result<AttackResult> {
    cfg.validate()?;
    let m = Matcher::new(target);
    let table = target.store.tensor(WORD_TABLE)?.clone();
    let pos = target.store.tensor("emb.pos")?.clone();
    let scale = (table.data().iter().map(|v| v * v).sum::<f64>() / table.len() as f64).sqrt();
    let mut best: Option<Run> = None;
    let starts: Vec<Option<Vec<f64>>> = match start {
        Some(x) => vec![Some(x)],
        None => (0..cfg.restarts).map(|_| None).collect(),
    };
    for (restart, s) in starts.into_iter().enumerate() {
        let x0 = match s {
            Some(x) if x.len() == m.dim() => x,
            Some(_) => return Err(Error::Input("start point has the wrong length".into())),
            None => {
                let mut r = rng::stream(cfg.seed, &[rng::ATTACK, restart as u64]);
                let split = m.rows * m.d;
                (0..m.dim())
                    .map(|i| {
                        let z: f64 = r.sample(StandardNormal);
                        if i < split {
                            z * scale
                        } else {
                            z * 0.1
                        }
                    })
                    .collect()
            }
        };
        let run = descend(&m, x0, cfg)?;
        if best.as_ref().is_none_or(|b| run.loss < b.loss) {
            best = Some(run);
        }
    }
    let run = best.expect("at least one restart");

    let batch = &target.batch;
    let mut recovered = Vec::with_capacity(batch.batch_size);
    for b in 0..batch.batch_size {
        let mut toks = Vec::new();
        for s in 0..batch.seq_len {
            let r = b * batch.seq_len + s;
            if !batch.pad_mask[r] {
                let p = &pos.data()[s * m.d..(s + 1) * m.d];
                toks.push(decode_row(&table, p, &run.x[r * m.d..(r + 1) * m.d]));
            }
        }
        recovered.push(toks);
    }
    let truth: Vec<Vec<usize>> = (0..batch.batch_size)
        .map(|b| {
            batch
                .row(b)
                .iter()
                .zip(&batch.pad_mask[b * batch.seq_len..(b + 1) * batch.seq_len])
                .filter(|(_, pad)| !**pad)
                .map(|(t, _)| *t)
                .collect()
        })
        .collect();
    let (precision, recall, f1) = best_alignment(&recovered, &truth);
    Ok(AttackResult {
        method: target.spec().label().to_string(),
        batch_size: batch.batch_size,
        seed: cfg.seed,
        iterations: run.iterations,
        final_loss: run.loss,
        precision,
        recall,
        f1,
        recovered,
    })
}

pub fn dlg_reconstruct(target: &AttackTarget, cfg: &AttackConfig) -> Result<AttackResult> {
    dlg_reconstruct_from(target, cfg, None)
}

/// The dummy point holding the true embeddings and confident true labels.
pub fn true_point(target: &AttackTarget) -> Result<Vec<f64>> {
    let table = target.store.tensor(WORD_TABLE)?;
    let d = table.shape()[1];
    let n = target.store.config().n_labels;
    let mut x = Vec::new();
    for &t in &target.batch.token_ids {
        x.extend_from_slice(&table.data()[t * d..(t + 1) * d]);
    }
    for &l in &target.batch.labels {
        x.extend((0..n).map(|c| if c == l { 30.0 } else { 0.0 }));
    }
    Ok(x)
}

/// Mean per-example scores under the example pairing that maximises mean F1.
///
/// The loss is symmetric in the order of examples, so dummy example `i` may
/// reconstruct true example `j`.
fn best_alignment(recovered: &[Vec<usize>], truth: &[Vec<usize>]) -> (f64, f64, f64) {
    let n = truth.len();
    let scores: Vec<Vec<(f64, f64, f64)>> = recovered
        .iter()
        .map(|r| truth.iter().map(|t| prf_metrics(r, t)).collect())
        .collect();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (f64::NEG_INFINITY, (0.0, 0.0, 0.0));
    let mut consider = |perm: &[usize]| {
        let mut sum = (0.0, 0.0, 0.0);
        for (i, &j) in perm.iter().enumerate() {
            let s = scores[i][j];
            sum = (sum.0 + s.0, sum.1 + s.1, sum.2 + s.2);
        }
        if sum.2 > best.0 {
            best = (sum.2, sum);
        }
    };
    if n <= 6 {
        permutations(&mut perm, 0, &mut consider);
    } else {
        consider(&perm);
    }
    let (p, r, f) = best.1;
    (p / n as f64, r / n as f64, f / n as f64)
}

fn permutations(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permutations(v, k + 1, f);
        v.swap(k, i);
    }
}
