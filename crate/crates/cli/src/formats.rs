//! Record types of every emitted file and their validators.
//!
//! | file | format |
//! |---|---|
//! | `metrics.jsonl` | one [`MetricRow`] per line |
//! | `summary.csv` | [`SummaryRow`] with header [`SUMMARY_HEADER`] |
//! | `attack.json` | [`AttackReport`] |
//! | `manifest.json` | [`RunManifest`] |
//! | `seed-*/plan-*.tsv` | partition plan text |
//! | `seed-*/js-*.tsv` | square JS distance matrix |
//! | `seed-*/backbone.ckpt` | checkpoint binary |

use std::collections::BTreeSet;

use fedpet_core::attack::AttackResult;
use fedpet_core::partition::PartitionPlan;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Federated,
    Centralized,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Federated => "federated",
            RunMode::Centralized => "centralized",
        }
    }
}

/// One evaluation point: a federated round or a centralized epoch.
///
/// `alpha`, `scenario` and `local_epochs` are null for centralized rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRow {
    pub method: String,
    pub mode: RunMode,
    pub alpha: Option<f64>,
    pub scenario: Option<String>,
    pub local_epochs: Option<usize>,
    pub seed: u64,
    pub round: usize,
    pub clients: Vec<usize>,
    pub val: f64,
    pub test: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub trainable_scalars: usize,
    pub train_loss: f64,
}

impl MetricRow {
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.round == 0 {
            return Err("round starts at 1".into());
        }
        for (name, v) in [("val", self.val), ("test", self.test)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} accuracy {v} outside [0, 1]"));
            }
        }
        if !self.train_loss.is_finite() || self.train_loss < 0.0 {
            return Err(format!("train_loss {} is not a finite non-negative number", self.train_loss));
        }
        if self.trainable_scalars == 0 {
            return Err("trainable_scalars is zero".into());
        }
        match self.mode {
            RunMode::Federated => {
                if self.alpha.is_none() || self.scenario.is_none() || self.local_epochs.is_none() {
                    return Err("federated rows need alpha, scenario and local_epochs".into());
                }
                if self.clients.is_empty() || !self.clients.windows(2).all(|w| w[0] < w[1]) {
                    return Err("clients must be non-empty and strictly increasing".into());
                }
                if self.bytes_up == 0 || !self.bytes_up.is_multiple_of(self.clients.len() as u64) {
                    return Err("bytes_up must be a positive multiple of the client count".into());
                }
            }
            RunMode::Centralized => {
                if self.alpha.is_some() || self.scenario.is_some() || self.local_epochs.is_some() {
                    return Err("centralized rows carry no federation fields".into());
                }
                if !self.clients.is_empty() || self.bytes_up != 0 || self.bytes_down != 0 {
                    return Err("centralized rows carry no traffic".into());
                }
            }
        }
        Ok(())
    }
}

/// Parses and checks a metrics file.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricRow>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let row: MetricRow =
                serde_json::from_str(line).map_err(|e| CliError::Parse(format!("metrics line {}: {e}", i + 1)))?;
            row.check()
                .map_err(|e| CliError::Parse(format!("metrics line {}: {e}", i + 1)))?;
            Ok(row)
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "method,mode,alpha,scenario,local_epochs,seed,rounds,best_round,best_val,best_test,final_test,total_bytes,trainable_scalars";

/// One finished run; `best_test` is the test accuracy at the first round with the highest validation accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub mode: RunMode,
    pub alpha: Option<f64>,
    pub scenario: Option<String>,
    pub local_epochs: Option<usize>,
    pub seed: u64,
    pub rounds: usize,
    pub best_round: usize,
    pub best_val: f64,
    pub best_test: f64,
    pub final_test: f64,
    pub total_bytes: u64,
    pub trainable_scalars: usize,
}

pub fn write_summary(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Parse(e.to_string()))?;
    }
    if rows.is_empty() {
        return Ok(format!("{SUMMARY_HEADER}\n"));
    }
    let bytes = w.into_inner().map_err(|e| CliError::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_summary(text: &str) -> Result<Vec<SummaryRow>> {
    let header = text.lines().next().unwrap_or_default();
    if header != SUMMARY_HEADER {
        return Err(CliError::Parse(format!("unexpected summary header {header:?}")));
    }
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<SummaryRow>, _>>()
        .map_err(|e| CliError::Parse(format!("summary: {e}")))?;
    for row in &rows {
        if row.best_round == 0 || row.best_round > row.rounds {
            return Err(CliError::Parse(format!("best_round {} outside [1, {}]", row.best_round, row.rounds)));
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeakScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackRecord {
    pub method: String,
    pub batch_size: usize,
    pub trial: usize,
    /// Distinct real tokens of the attacked batch.
    pub tokens: Vec<usize>,
    /// Null when the upload carries no word embedding gradient.
    pub leak: Option<LeakScore>,
    pub dlg: AttackResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackCell {
    pub method: String,
    pub batch_size: usize,
    pub trials: usize,
    pub mean_f1: f64,
    pub mean_leak_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackReport {
    pub config_hash: String,
    pub records: Vec<AttackRecord>,
    pub cells: Vec<AttackCell>,
}

pub fn parse_attack(text: &str) -> Result<AttackReport> {
    let report: AttackReport = serde_json::from_str(text).map_err(|e| CliError::Parse(format!("attack report: {e}")))?;
    for r in &report.records {
        let scores = [r.dlg.precision, r.dlg.recall, r.dlg.f1];
        let leak = r.leak.iter().flat_map(|l| [l.precision, l.recall, l.f1]);
        if scores.into_iter().chain(leak).any(|v| !(0.0..=1.0).contains(&v)) {
            return Err(CliError::Parse("attack scores must lie in [0, 1]".into()));
        }
        if r.dlg.recovered.len() != r.batch_size {
            return Err(CliError::Parse("one decoded sequence per example is required".into()));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config_hash: String,
    pub command: String,
    pub tool_version: String,
    /// Paths relative to the output directory, sorted.
    pub artifacts: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn parse_manifest(text: &str) -> Result<RunManifest> {
    let m: RunManifest = serde_json::from_str(text).map_err(|e| CliError::Parse(format!("manifest: {e}")))?;
    if m.config_hash.len() != 64 || !m.config_hash.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(CliError::Parse("config_hash is not a sha-256 hex digest".into()));
    }
    if m.finished_unix < m.started_unix {
        return Err(CliError::Parse("finished before it started".into()));
    }
    let unique: BTreeSet<&String> = m.artifacts.iter().collect();
    if unique.len() != m.artifacts.len() {
        return Err(CliError::Parse("duplicate artifact path".into()));
    }
    Ok(m)
}

/// Tab-separated square matrix, one client per row.
pub fn js_matrix_tsv(m: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for row in m {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&cells.join("\t"));
        s.push('\n');
    }
    s
}

pub fn parse_js_matrix(text: &str) -> Result<Vec<Vec<f64>>> {
    let m: Vec<Vec<f64>> = text
        .lines()
        .map(|l| {
            l.split('\t')
                .map(|x| x.parse::<f64>().map_err(|_| CliError::Parse(format!("bad JS value {x:?}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = m.len();
    for (i, row) in m.iter().enumerate() {
        if row.len() != n {
            return Err(CliError::Parse("JS matrix is not square".into()));
        }
        if row[i] != 0.0 || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CliError::Parse("JS matrix needs a zero diagonal and values in [0, 1]".into()));
        }
        if (0..n).any(|j| row[j] != m[j][i]) {
            return Err(CliError::Parse("JS matrix is not symmetric".into()));
        }
    }
    Ok(m)
}

/// Checks a plan file against the training labels it was built from.
pub fn parse_plan(text: &str, labels: &[usize], n_labels: usize) -> Result<PartitionPlan> {
    let plan = PartitionPlan::from_text(text, labels, n_labels)?;
    if !plan.is_partition_of(labels.len()) {
        return Err(CliError::Parse("plan does not partition the training split".into()));
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fed_row() -> MetricRow {
        MetricRow {
            method: "BitFit".into(),
            mode: RunMode::Federated,
            alpha: Some(1.0),
            scenario: Some("standard".into()),
            local_epochs: Some(1),
            seed: 0,
            round: 1,
            clients: vec![0, 3],
            val: 0.5,
            test: 0.25,
            bytes_up: 200,
            bytes_down: 200,
            trainable_scalars: 20,
            train_loss: 1.1,
        }
    }

    #[test]
    fn metrics_round_trip_and_reject_bad_rows() {
        let row = fed_row();
        let line = serde_json::to_string(&row).unwrap();
        assert_eq!(parse_metrics(&line).unwrap(), vec![row.clone()]);

        let mut bad = row.clone();
        bad.test = 1.5;
        assert!(parse_metrics(&serde_json::to_string(&bad).unwrap()).is_err());
        let mut bad = row.clone();
        bad.mode = RunMode::Centralized;
        assert!(parse_metrics(&serde_json::to_string(&bad).unwrap()).is_err());
        assert!(parse_metrics(&line.replace("\"seed\"", "\"extra\":1,\"seed\"")).is_err());
    }

    #[test]
    fn summary_header_is_frozen() {
        let row = SummaryRow {
            method: "LoRA(r=4,s=8,qv)".into(),
            mode: RunMode::Centralized,
            alpha: None,
            scenario: None,
            local_epochs: None,
            seed: 2,
            rounds: 30,
            best_round: 12,
            best_val: 0.9,
            best_test: 0.875,
            final_test: 0.8,
            total_bytes: 0,
            trainable_scalars: 1000,
        };
        let text = write_summary(std::slice::from_ref(&row)).unwrap();
        assert_eq!(text.lines().next().unwrap(), SUMMARY_HEADER);
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "\"LoRA(r=4,s=8,qv)\",centralized,,,,2,30,12,0.9,0.875,0.8,0,1000"
        );
        assert_eq!(parse_summary(&text).unwrap(), vec![row]);
        assert_eq!(write_summary(&[]).unwrap(), format!("{SUMMARY_HEADER}\n"));
    }

    #[test]
    fn js_matrix_checks() {
        let m = vec![vec![0.0, 0.5], vec![0.5, 0.0]];
        assert_eq!(parse_js_matrix(&js_matrix_tsv(&m)).unwrap(), m);
        assert!(parse_js_matrix("0\t0.5\n0.4\t0\n").is_err());
        assert!(parse_js_matrix("0.1\t0.5\n0.5\t0\n").is_err());
    }
}
