//! Pretraining, partitioning, federated runs and attacks driven by a config.
//!
//! Every seed field inside `data` and `federation` is replaced by the run
//! seed, `config.seed + repeat_index`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use fedpet_core::attack::{self, AttackTarget};
use fedpet_core::data::{self, Splits, SyntheticSpec};
use fedpet_core::delta::{self, DeltaSpec};
use fedpet_core::federation::{self, CentralConfig, FederationConfig};
use fedpet_core::model::{self, ParameterStore};
use fedpet_core::partition::{self, PartitionPlan};
use fedpet_core::wire;

use crate::config::{AttackSetup, ExperimentConfig, MethodConfig};
use crate::error::{CliError, Result};
use crate::formats::{
    self, AttackCell, AttackRecord, AttackReport, LeakScore, MetricRow, RunManifest, RunMode, SummaryRow,
};

/// Pretext data is drawn from this offset of the run seed.
pub const PRETEXT_SEED_OFFSET: u64 = 1000;
/// Examples generated per attack trial; the batch is taken from the front of the training split.
pub const ATTACK_POOL: usize = 100;

/// File locations under an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn checkpoint(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("backbone.ckpt")
    }

    pub fn plan(&self, seed: u64, alpha: f64) -> PathBuf {
        self.seed_dir(seed).join(format!("plan-alpha{alpha}.tsv"))
    }

    pub fn js(&self, seed: u64, alpha: f64) -> PathBuf {
        self.seed_dir(seed).join(format!("js-alpha{alpha}.tsv"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.csv")
    }

    pub fn attack(&self) -> PathBuf {
        self.root.join("attack.json")
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join(format!("manifest-{command}.json"))
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Training, validation and test splits of run `seed`.
pub fn splits_for(cfg: &ExperimentConfig, seed: u64) -> Result<Splits> {
    Ok(data::generate(&SyntheticSpec {
        seed,
        ..cfg.data.clone()
    })?)
}

/// Builds the model, pretrains it on relabeled pretext data and resets the head.
pub fn pretrained_backbone(cfg: &ExperimentConfig, seed: u64) -> Result<ParameterStore> {
    let init = model::build(&cfg.model, seed)?;
    let p = &cfg.pretrain;
    if p.steps == 0 {
        let mut out = init;
        out.freeze_all();
        return Ok(out);
    }
    let pretext = data::generate(&SyntheticSpec {
        n_examples: p.examples,
        seed: seed + PRETEXT_SEED_OFFSET,
        ..cfg.data.clone()
    })?;
    // Rotated labels keep the features useful without leaking the task head.
    let perm: Vec<usize> = (0..cfg.data.n_labels).map(|l| (l + 1) % cfg.data.n_labels).collect();
    let mut store = model::pretrain_backbone(&init, &pretext.train.relabeled(&perm)?, p.steps, p.lr, seed)?;
    store.reset_head(seed)?;
    Ok(store)
}

pub fn plan_for(cfg: &ExperimentConfig, splits: &Splits, alpha_index: usize, seed: u64) -> Result<PartitionPlan> {
    let pc = cfg.partitions[alpha_index].resolve(cfg.federation.total_clients, seed);
    Ok(partition::partition_dirichlet(&splits.train.labels(), cfg.data.n_labels, &pc)?)
}

/// Writes one backbone checkpoint per seed.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(&cfg.output_dir);
    let mut out = Vec::new();
    for seed in cfg.seeds() {
        let store = pretrained_backbone(cfg, seed)?;
        let path = layout.checkpoint(seed);
        write(&path, &wire::encode_checkpoint(&store, 8)?)?;
        out.push(path);
    }
    Ok(out)
}

/// Writes a plan and its JS distance matrix per seed and partition.
pub fn partition(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(&cfg.output_dir);
    let mut out = Vec::new();
    for seed in cfg.seeds() {
        let splits = splits_for(cfg, seed)?;
        for (i, p) in cfg.partitions.iter().enumerate() {
            let plan = plan_for(cfg, &splits, i, seed)?;
            let plan_path = layout.plan(seed, p.alpha);
            write(&plan_path, plan.to_text().as_bytes())?;
            let js_path = layout.js(seed, p.alpha);
            let m = partition::js_distance_matrix(&plan);
            write(&js_path, formats::js_matrix_tsv(&m).as_bytes())?;
            out.push(plan_path);
            out.push(js_path);
        }
    }
    Ok(out)
}

/// In-memory result of [`run`].
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub metrics: Vec<MetricRow>,
    pub summary: Vec<SummaryRow>,
}

fn central_rows(
    method: &MethodConfig,
    cfg: &ExperimentConfig,
    splits: &Splits,
    backbone: &ParameterStore,
    seed: u64,
    out: &mut RunOutput,
) -> Result<()> {
    let cc = CentralConfig {
        epochs: cfg.federation.rounds,
        batch_size: cfg.federation.batch_size,
        optimizer: method.optimizer,
        seed,
    };
    let res = federation::run_centralized(splits, &method.delta, &cc, backbone)?;
    let scalars = res.state.current.scalar_count();
    let name = method.delta.to_string();
    for r in &res.records {
        out.metrics.push(MetricRow {
            method: name.clone(),
            mode: RunMode::Centralized,
            alpha: None,
            scenario: None,
            local_epochs: None,
            seed,
            round: r.epoch,
            clients: Vec::new(),
            val: r.val,
            test: r.test,
            bytes_up: 0,
            bytes_down: 0,
            trainable_scalars: scalars,
            train_loss: r.train_loss,
        });
    }
    out.summary.push(SummaryRow {
        method: name,
        mode: RunMode::Centralized,
        alpha: None,
        scenario: None,
        local_epochs: None,
        seed,
        rounds: res.records.len(),
        best_round: res.state.best_round,
        best_val: res.state.best_val,
        best_test: res.state.best_test,
        final_test: res.records.last().map_or(f64::NAN, |r| r.test),
        total_bytes: 0,
        trainable_scalars: scalars,
    });
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn federated_rows(
    method: &MethodConfig,
    cfg: &ExperimentConfig,
    splits: &Splits,
    plan: &PartitionPlan,
    epochs: usize,
    backbone: &ParameterStore,
    seed: u64,
    out: &mut RunOutput,
) -> Result<()> {
    let fc = FederationConfig {
        local_epochs: epochs,
        optimizer: method.optimizer,
        seed,
        ..cfg.federation.clone()
    };
    let res = federation::run_federated(splits, plan, &method.delta, &fc, backbone)?;
    let name = method.delta.to_string();
    let scenario = fc.scenario.as_str().to_string();
    let mut total = 0;
    for r in &res.records {
        total += r.bytes_up + r.bytes_down;
        out.metrics.push(MetricRow {
            method: name.clone(),
            mode: RunMode::Federated,
            alpha: Some(plan.alpha),
            scenario: Some(scenario.clone()),
            local_epochs: Some(epochs),
            seed,
            round: r.round,
            clients: r.clients.clone(),
            val: r.val,
            test: r.test,
            bytes_up: r.bytes_up,
            bytes_down: r.bytes_down,
            trainable_scalars: r.trainable_scalars,
            train_loss: r.train_loss,
        });
    }
    out.summary.push(SummaryRow {
        method: name,
        mode: RunMode::Federated,
        alpha: Some(plan.alpha),
        scenario: Some(scenario),
        local_epochs: Some(epochs),
        seed,
        rounds: res.records.len(),
        best_round: res.state.best_round,
        best_val: res.state.best_val,
        best_test: res.state.best_test,
        final_test: res.records.last().map_or(f64::NAN, |r| r.test),
        total_bytes: total,
        trainable_scalars: res.state.current.scalar_count(),
    });
    Ok(())
}

/// Every (seed, method, partition, epochs) cell of the config, plus pooled
/// training when `centralized` is set. Nothing is written.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut out = RunOutput::default();
    for seed in cfg.seeds() {
        let splits = splits_for(cfg, seed)?;
        let backbone = pretrained_backbone(cfg, seed)?;
        let plans = (0..cfg.partitions.len())
            .map(|i| plan_for(cfg, &splits, i, seed))
            .collect::<Result<Vec<_>>>()?;
        for method in &cfg.methods {
            if cfg.centralized {
                central_rows(method, cfg, &splits, &backbone, seed, &mut out)?;
            }
            for plan in &plans {
                for e in cfg.epoch_grid() {
                    federated_rows(method, cfg, &splits, plan, e, &backbone, seed, &mut out)?;
                }
            }
        }
    }
    Ok(out)
}

pub fn metrics_jsonl(rows: &[MetricRow]) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).expect("metric row serializes"));
        s.push('\n');
    }
    s
}

fn write_manifest(layout: &Layout, cfg: &ExperimentConfig, command: &str, artifacts: &[PathBuf], started: u64) -> Result<PathBuf> {
    let mut paths: Vec<String> = artifacts.iter().map(|p| layout.relative(p)).collect();
    paths.sort();
    paths.dedup();
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        command: command.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        artifacts: paths,
        started_unix: started,
        finished_unix: unix_now(),
    };
    let path = layout.manifest(command);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&path, text.as_bytes())?;
    Ok(path)
}

/// Runs the experiment and writes checkpoints, plans, metrics, summary and a manifest.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let started = unix_now();
    let layout = Layout::new(&cfg.output_dir);
    let mut artifacts = pretrain(cfg)?;
    artifacts.extend(partition(cfg)?);
    let out = execute(cfg)?;
    write(&layout.metrics(), metrics_jsonl(&out.metrics).as_bytes())?;
    write(&layout.summary(), formats::write_summary(&out.summary)?.as_bytes())?;
    artifacts.push(layout.metrics());
    artifacts.push(layout.summary());
    let manifest = write_manifest(&layout, cfg, "run", &artifacts, started)?;
    artifacts.push(manifest);
    Ok(artifacts)
}

/// Model and captured upload of one attack trial.
pub fn attack_target(setup: &AttackSetup, data: &SyntheticSpec, spec: &DeltaSpec, batch_size: usize, seed: u64) -> Result<AttackTarget> {
    let pool = data::generate(&SyntheticSpec {
        n_examples: ATTACK_POOL.max(2 * batch_size),
        seq_len: setup.seq_len,
        seed,
        ..data.clone()
    })?;
    let mut store = model::build(&setup.model, seed)?;
    let state = delta::attach(&mut store, spec, seed)?;
    let idx: Vec<usize> = (0..batch_size).collect();
    let batch = pool.train.batch(&idx)?;
    Ok(attack::capture_update(&store, &state, &batch, setup.optimizer, setup.local_steps)?)
}

/// Distinct real tokens of the captured batch.
pub fn batch_tokens(target: &AttackTarget) -> Vec<usize> {
    let b = &target.batch;
    let mask = b.real_mask();
    let mut t: Vec<usize> = b.token_ids.iter().zip(&mask).filter(|(_, m)| **m).map(|(t, _)| *t).collect();
    t.sort_unstable();
    t.dedup();
    t
}

/// Embedding-row leak and DLG reconstruction for one trial.
pub fn attack_trial(
    setup: &AttackSetup,
    data: &SyntheticSpec,
    spec: &DeltaSpec,
    batch_size: usize,
    trial: usize,
    seed: u64,
) -> Result<AttackRecord> {
    let target = attack_target(setup, data, spec, batch_size, seed)?;
    let tokens = batch_tokens(&target);
    let leak = match attack::embedding_grad_leak(&target) {
        Ok(found) => {
            let found: Vec<usize> = found.into_iter().collect();
            let (precision, recall, f1) = attack::prf_metrics(&found, &tokens);
            Some(LeakScore { precision, recall, f1 })
        }
        Err(fedpet_core::Error::LeakUnavailable) => None,
        Err(e) => return Err(e.into()),
    };
    let dlg_cfg = fedpet_core::attack::AttackConfig {
        seed,
        ..setup.dlg.clone()
    };
    let dlg = attack::dlg_reconstruct(&target, &dlg_cfg)?;
    Ok(AttackRecord {
        method: spec.to_string(),
        batch_size,
        trial,
        tokens,
        leak,
        dlg,
    })
}

/// Mean scores per (method, batch size), in first-seen order.
pub fn attack_cells(records: &[AttackRecord]) -> Vec<AttackCell> {
    let mut cells: Vec<AttackCell> = Vec::new();
    let mut sums: Vec<(f64, f64, usize)> = Vec::new();
    for r in records {
        let i = match cells.iter().position(|c| c.method == r.method && c.batch_size == r.batch_size) {
            Some(i) => i,
            None => {
                cells.push(AttackCell {
                    method: r.method.clone(),
                    batch_size: r.batch_size,
                    trials: 0,
                    mean_f1: 0.0,
                    mean_leak_f1: None,
                });
                sums.push((0.0, 0.0, 0));
                cells.len() - 1
            }
        };
        cells[i].trials += 1;
        sums[i].0 += r.dlg.f1;
        if let Some(l) = &r.leak {
            sums[i].1 += l.f1;
            sums[i].2 += 1;
        }
    }
    for (c, (f1, leak, n_leak)) in cells.iter_mut().zip(sums) {
        c.mean_f1 = f1 / c.trials as f64;
        c.mean_leak_f1 = (n_leak > 0).then(|| leak / n_leak as f64);
    }
    cells
}

/// Runs every attack cell of the config and writes `attack.json`.
pub fn attack(cfg: &ExperimentConfig) -> Result<(PathBuf, AttackReport)> {
    cfg.validate()?;
    let started = unix_now();
    let setup = cfg
        .attack
        .as_ref()
        .ok_or_else(|| CliError::Config("the config has no attack section".into()))?;
    let mut records = Vec::new();
    for &bs in &setup.batch_sizes {
        for spec in &setup.methods {
            for trial in 0..setup.trials {
                let seed = cfg.seed + trial as u64;
                records.push(attack_trial(setup, &cfg.data, spec, bs, trial, seed)?);
            }
        }
    }
    let report = AttackReport {
        config_hash: cfg.hash(),
        cells: attack_cells(&records),
        records,
    };
    let layout = Layout::new(&cfg.output_dir);
    let path = layout.attack();
    let text = serde_json::to_string_pretty(&report).expect("attack report serializes");
    write(&path, text.as_bytes())?;
    write_manifest(&layout, cfg, "attack", std::slice::from_ref(&path), started)?;
    Ok((path, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::preset;

    #[test]
    fn layout_paths() {
        let l = Layout::new("out");
        assert_eq!(l.plan(3, 0.1), PathBuf::from("out/seed-3/plan-alpha0.1.tsv"));
        assert_eq!(l.checkpoint(0), PathBuf::from("out/seed-0/backbone.ckpt"));
        assert_eq!(l.relative(&l.summary()), "summary.csv");
    }

    #[test]
    fn attack_cells_average_per_method_and_batch() {
        let cfg = preset("privacy").unwrap();
        let mut setup = cfg.attack.unwrap();
        setup.dlg.max_iters = 2;
        let a = attack_trial(&setup, &cfg.data, &DeltaSpec::full(), 1, 0, 0).unwrap();
        let b = attack_trial(&setup, &cfg.data, &DeltaSpec::bitfit(), 1, 0, 0).unwrap();
        assert!(a.leak.is_some() && b.leak.is_none());
        let cells = attack_cells(&[a.clone(), b, a.clone()]);
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].trials, 2);
        assert_eq!(cells[0].mean_f1, a.dlg.f1);
        assert_eq!(cells[1].mean_leak_f1, None);
    }
}
