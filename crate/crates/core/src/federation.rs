//! FedAvg over efficient payloads, plus the pooled-data baseline.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Splits};
use crate::delta::{attach, extract_efficient, inject_efficient, DeltaSpec, DeltaState, Payload};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, predict, ParameterStore};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::partition::PartitionPlan;
use crate::rng;
use crate::train::train_step;
use crate::wire;

/// Scalars are counted at this width on the wire.
pub const WIRE_WIDTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    #[default]
    Standard,
    CrossSilo,
    LargeScale,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Standard => "standard",
            Scenario::CrossSilo => "cross-silo",
            Scenario::LargeScale => "large-scale",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub total_clients: usize,
    pub sample_size: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    #[serde(default)]
    pub scenario: Scenario,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_size == 0 || self.sample_size > self.total_clients {
            return Err(Error::Config(format!(
                "sample size {} must lie in [1, {}]",
                self.sample_size, self.total_clients
            )));
        }
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("rounds, local_epochs and batch_size must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

/// Metrics of one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<usize>,
    pub val: f64,
    pub test: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub trainable_scalars: usize,
    /// Mean over sampled clients of their last local epoch's loss.
    pub train_loss: f64,
}

/// `k` distinct client ids drawn uniformly for `round`, sorted ascending.
pub fn sample_clients(c: usize, k: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if k > c {
        return Err(Error::Config(format!("cannot sample {k} of {c} clients")));
    }
    let mut r = rng::stream(seed, &[rng::SAMPLE, round as u64]);
    let mut ids = rand::seq::index::sample(&mut r, c, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Accuracy of the assembled model on `data`.
pub fn accuracy(store: &ParameterStore, delta: Option<&DeltaState>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty split".into()));
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(256) {
        let batch = data.batch(chunk)?;
        let logits = predict(store, delta, &batch)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mini-batch passes over `indices`; returns the mean loss of each epoch.
fn run_epochs(
    store: &mut ParameterStore,
    delta: &mut DeltaState,
    train: &Dataset,
    indices: &[usize],
    epochs: usize,
    batch_size: usize,
    opt: &mut Optimizer,
    r: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(Error::Input("no local training data".into()));
    }
    let mut losses = Vec::with_capacity(epochs);
    let mut order = indices.to_vec();
    for _ in 0..epochs {
        order.copy_from_slice(indices);
        order.shuffle(r);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch = train.batch(chunk)?;
            total += train_step(store, delta, &batch, opt, r)? * chunk.len() as f64;
        }
        losses.push(total / indices.len() as f64);
    }
    Ok(losses)
}

/// One client's share of a round.
#[derive(Debug, Clone)]
pub struct LocalJob<'a> {
    pub train: &'a Dataset,
    pub client_id: usize,
    pub indices: &'a [usize],
    pub round: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub payload: Payload,
    pub epoch_losses: Vec<f64>,
}

/// Injects `global`, trains for the job's epochs with fresh optimizer state, and extracts.
pub fn client_local_tuning(
    store: &mut ParameterStore,
    delta: &mut DeltaState,
    global: &Payload,
    job: &LocalJob<'_>,
) -> Result<LocalOutcome> {
    inject_efficient(store, delta, global)?;
    let mut opt = Optimizer::new(job.optimizer);
    let mut r = rng::stream(job.seed, &[rng::LOCAL, job.round as u64, job.client_id as u64]);
    let epoch_losses = run_epochs(
        store,
        delta,
        job.train,
        job.indices,
        job.epochs,
        job.batch_size,
        &mut opt,
        &mut r,
    )?;
    Ok(LocalOutcome {
        payload: extract_efficient(store, delta)?,
        epoch_losses,
    })
}

/// Data-size-weighted mean of payloads, summed in the given order.
pub fn aggregate(payloads: &[(usize, &Payload)]) -> Result<Payload> {
    let (_, first) = payloads
        .first()
        .ok_or_else(|| Error::Contract("nothing to aggregate".into()))?;
    if payloads.iter().any(|(n, _)| *n == 0) {
        return Err(Error::Contract("client sizes must be positive".into()));
    }
    if let Some((_, p)) = payloads.iter().find(|(_, p)| !p.same_layout(first)) {
        let names: Vec<&str> = p.names().collect();
        return Err(Error::Payload(format!("payload layout differs: {names:?}")));
    }
    let total: usize = payloads.iter().map(|(n, _)| n).sum();
    let weights: Vec<f64> = payloads.iter().map(|(n, _)| *n as f64 / total as f64).collect();
    let mut entries = Vec::with_capacity(first.len());
    for (i, (name, t)) in first.entries().iter().enumerate() {
        // Offsets from the first payload make identical inputs come back
        // unchanged; clamping keeps rounding inside the convex hull.
        let mut out = t.to_vec();
        for (j, o) in out.iter_mut().enumerate() {
            let base = *o;
            let (mut acc, mut lo, mut hi) = (0.0, base, base);
            for ((_, p), w) in payloads.iter().zip(&weights) {
                let x = p.entries()[i].1.data()[j];
                acc += w * (x - base);
                lo = lo.min(x);
                hi = hi.max(x);
            }
            *o = (base + acc).clamp(lo, hi);
        }
        entries.push((name.clone(), fedpet_autodiff::Tensor::new(t.shape().to_vec(), out)?));
    }
    Payload::new(entries)
}

/// Server-side state of a federated run.
#[derive(Debug, Clone)]
pub struct GlobalState {
    /// Frozen backbone with the spec's trainable flags set.
    pub backbone: ParameterStore,
    pub template: DeltaState,
    pub current: Payload,
    pub best: Payload,
    pub best_round: usize,
    pub best_val: f64,
    pub best_test: f64,
}

impl GlobalState {
    pub fn new(backbone: &ParameterStore, spec: &DeltaSpec, seed: u64) -> Result<Self> {
        let mut store = backbone.clone();
        let template = attach(&mut store, spec, seed)?;
        let current = extract_efficient(&store, &template)?;
        Ok(GlobalState {
            backbone: store,
            template,
            best: current.clone(),
            current,
            best_round: 0,
            best_val: f64::NEG_INFINITY,
            best_test: f64::NAN,
        })
    }

    /// Backbone plus `payload` as a fresh model copy.
    pub fn assemble(&self, payload: &Payload) -> Result<(ParameterStore, DeltaState)> {
        let mut store = self.backbone.clone();
        let mut delta = self.template.clone();
        inject_efficient(&mut store, &mut delta, payload)?;
        Ok((store, delta))
    }

    pub fn payload_bytes(&self) -> usize {
        wire::payload_len(
            self.current.entries().iter().map(|(n, t)| (n.as_str(), t.shape())),
            WIRE_WIDTH,
        )
    }

    fn evaluate(&self, payload: &Payload, splits: &Splits) -> Result<(f64, f64)> {
        let (store, delta) = self.assemble(payload)?;
        Ok((
            accuracy(&store, Some(&delta), &splits.val)?,
            accuracy(&store, Some(&delta), &splits.test)?,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct FederatedOutcome {
    pub state: GlobalState,
    pub records: Vec<RoundRecord>,
}

/// Runs `cfg.rounds` rounds of sample, local tuning and aggregation.
pub fn run_federated(
    splits: &Splits,
    plan: &PartitionPlan,
    spec: &DeltaSpec,
    cfg: &FederationConfig,
    backbone: &ParameterStore,
) -> Result<FederatedOutcome> {
    cfg.validate()?;
    if plan.n_clients() != cfg.total_clients {
        return Err(Error::Config(format!(
            "plan has {} clients but the federation expects {}",
            plan.n_clients(),
            cfg.total_clients
        )));
    }
    let mut state = GlobalState::new(backbone, spec, cfg.seed)?;
    let payload_bytes = state.payload_bytes() as u64;
    let mut records = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let sampled = sample_clients(cfg.total_clients, cfg.sample_size, round, cfg.seed)?;
        let mut updates = Vec::with_capacity(sampled.len());
        let mut loss = 0.0;
        for &id in &sampled {
            let mut store = state.backbone.clone();
            let mut delta = state.template.clone();
            let job = LocalJob {
                train: &splits.train,
                client_id: id,
                indices: &plan.clients[id],
                round,
                epochs: cfg.local_epochs,
                batch_size: cfg.batch_size,
                optimizer: cfg.optimizer,
                seed: cfg.seed,
            };
            let out = client_local_tuning(&mut store, &mut delta, &state.current, &job)?;
            loss += out.epoch_losses.last().copied().unwrap_or(f64::NAN);
            updates.push((plan.clients[id].len(), out.payload));
        }
        let refs: Vec<(usize, &Payload)> = updates.iter().map(|(n, p)| (*n, p)).collect();
        state.current = aggregate(&refs)?;
        let (val, test) = state.evaluate(&state.current, splits)?;
        if val > state.best_val {
            state.best_val = val;
            state.best_test = test;
            state.best_round = round;
            state.best = state.current.clone();
        }
        let k = sampled.len() as u64;
        records.push(RoundRecord {
            round,
            clients: sampled,
            val,
            test,
            bytes_up: k * payload_bytes,
            bytes_down: k * payload_bytes,
            trainable_scalars: state.current.scalar_count(),
            train_loss: loss / k as f64,
        });
    }
    Ok(FederatedOutcome { state, records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val: f64,
    pub test: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone)]
pub struct CentralOutcome {
    pub state: GlobalState,
    pub records: Vec<EpochRecord>,
}

/// Trains the same decorated model on the pooled training split.
///
/// Epoch `t` draws from the stream federated round `t` gives client 0, so a
/// one-client federation with stateless SGD follows the same trajectory.
pub fn run_centralized(
    splits: &Splits,
    spec: &DeltaSpec,
    cfg: &CentralConfig,
    backbone: &ParameterStore,
) -> Result<CentralOutcome> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be at least 1".into()));
    }
    cfg.optimizer.validate()?;
    let mut state = GlobalState::new(backbone, spec, cfg.seed)?;
    let (mut store, mut delta) = state.assemble(&state.current)?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let indices: Vec<usize> = (0..splits.train.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut r = rng::stream(cfg.seed, &[rng::LOCAL, epoch as u64, 0]);
        let losses = run_epochs(
            &mut store,
            &mut delta,
            &splits.train,
            &indices,
            1,
            cfg.batch_size,
            &mut opt,
            &mut r,
        )?;
        state.current = extract_efficient(&store, &delta)?;
        let val = accuracy(&store, Some(&delta), &splits.val)?;
        let test = accuracy(&store, Some(&delta), &splits.test)?;
        if val > state.best_val {
            state.best_val = val;
            state.best_test = test;
            state.best_round = epoch;
            state.best = state.current.clone();
        }
        records.push(EpochRecord {
            epoch,
            val,
            test,
            train_loss: losses[0],
        });
    }
    Ok(CentralOutcome { state, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedpet_autodiff::Tensor;

    fn scalar_payload(v: f64) -> Payload {
        Payload::new(vec![("x".into(), Tensor::new(vec![1], vec![v]).unwrap())]).unwrap()
    }

    #[test]
    fn sampling_contract() {
        assert_eq!(sample_clients(5, 5, 3, 1).unwrap(), vec![0, 1, 2, 3, 4]);
        let a = sample_clients(100, 10, 7, 1).unwrap();
        assert_eq!(a, sample_clients(100, 10, 7, 1).unwrap());
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(sample_clients(3, 4, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn aggregate_hand_case() {
        let a = scalar_payload(0.0);
        let b = scalar_payload(4.0);
        let out = aggregate(&[(1, &a), (3, &b)]).unwrap();
        assert_eq!(out.get("x").unwrap().data(), &[3.0]);
    }

    #[test]
    fn aggregate_errors() {
        assert!(matches!(aggregate(&[]), Err(Error::Contract(_))));
        let a = scalar_payload(1.0);
        let other = Payload::new(vec![("y".into(), Tensor::scalar(1.0))]).unwrap();
        assert!(matches!(aggregate(&[(1, &a), (1, &other)]), Err(Error::Payload(_))));
        assert!(matches!(aggregate(&[(0, &a)]), Err(Error::Contract(_))));
    }
}
