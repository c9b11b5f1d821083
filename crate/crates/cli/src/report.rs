//! Comparison tables and plot data from raw metrics, and the cost table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedpet_core::accounting::{self, ArchShape};
use fedpet_core::delta::{DeltaSpec, LoraTarget};
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::experiment::write;
use crate::formats::{self, MetricRow, RunMode};

pub const COMPARISON_HEADER: &str = "method,mode,alpha,scenario,local_epochs,seeds,test_mean,test_std,rel,com";
pub const CURVES_HEADER: &str = "method\tmode\talpha\tscenario\tlocal_epochs\tround\tval_mean\ttest_mean";
pub const BUDGET_HEADER: &str = "method\talpha\tscenario\tlocal_epochs\tround\tcumulative_mb\ttest_mean";

pub const ROBERTA_BASE: &str = include_str!("../shapes/roberta-base.json");

/// Everything but the method and seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Setting {
    pub mode: RunMode,
    pub alpha: Option<f64>,
    pub scenario: Option<String>,
    pub local_epochs: Option<usize>,
}

impl Setting {
    fn of(row: &MetricRow) -> Self {
        Setting {
            mode: row.mode,
            alpha: row.alpha,
            scenario: row.scenario.clone(),
            local_epochs: row.local_epochs,
        }
    }

    fn key(&self) -> String {
        format!(
            "{}|{}|{}|{}",
            self.mode.as_str(),
            opt(self.alpha),
            self.scenario.as_deref().unwrap_or(""),
            opt(self.local_epochs)
        )
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: String,
    #[serde(flatten)]
    pub setting: Setting,
    pub seeds: usize,
    pub test_mean: f64,
    pub test_std: f64,
    /// Mean test accuracy over that of FT in the same setting.
    pub rel: Option<f64>,
    /// FT trainable scalars over this method's.
    pub com: Option<f64>,
}

struct Run<'a> {
    method: &'a str,
    setting: Setting,
    rows: Vec<&'a MetricRow>,
}

/// Groups rows by (method, setting, seed), keeping first-seen order.
fn runs(rows: &[MetricRow]) -> Vec<Run<'_>> {
    let mut index: BTreeMap<(String, String, u64), usize> = BTreeMap::new();
    let mut out: Vec<Run> = Vec::new();
    for r in rows {
        let s = Setting::of(r);
        let key = (r.method.clone(), s.key(), r.seed);
        let i = *index.entry(key).or_insert_with(|| {
            out.push(Run {
                method: &r.method,
                setting: s,
                rows: Vec::new(),
            });
            out.len() - 1
        });
        out[i].rows.push(r);
    }
    for run in &mut out {
        run.rows.sort_by_key(|r| r.round);
    }
    out
}

/// Test accuracy at the first round with the highest validation accuracy.
pub fn best_test(rows: &[&MetricRow]) -> f64 {
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for r in rows {
        if r.val > best.0 {
            best = (r.val, r.test);
        }
    }
    best.1
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One row per (method, setting), with `rel` against `FT` in the same setting.
pub fn comparison(rows: &[MetricRow]) -> Vec<ComparisonRow> {
    let mut cells: Vec<(String, Setting, Vec<f64>, usize)> = Vec::new();
    for run in runs(rows) {
        let scalars = run.rows[0].trainable_scalars;
        let acc = best_test(&run.rows);
        match cells
            .iter_mut()
            .find(|(m, s, _, _)| m == run.method && s.key() == run.setting.key())
        {
            Some(c) => c.2.push(acc),
            None => cells.push((run.method.to_string(), run.setting, vec![acc], scalars)),
        }
    }
    let reference: BTreeMap<String, (f64, usize)> = cells
        .iter()
        .filter(|(m, ..)| m == "FT")
        .map(|(_, s, accs, n)| (s.key(), (mean_std(accs).0, *n)))
        .collect();
    cells
        .into_iter()
        .map(|(method, setting, accs, scalars)| {
            let (test_mean, test_std) = mean_std(&accs);
            let ft = reference.get(&setting.key());
            ComparisonRow {
                method,
                seeds: accs.len(),
                test_mean,
                test_std,
                rel: ft.map(|(acc, _)| test_mean / acc),
                com: ft.map(|(_, n)| *n as f64 / scalars as f64),
                setting,
            }
        })
        .collect()
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = format!("{COMPARISON_HEADER}\n");
    for r in rows {
        let method = accounting::csv_field(&r.method);
        let _ = writeln!(
            s,
            "{method},{},{},{},{},{},{:.4},{:.4},{},{}",
            r.setting.mode.as_str(),
            opt(r.setting.alpha),
            r.setting.scenario.as_deref().unwrap_or(""),
            opt(r.setting.local_epochs),
            r.seeds,
            r.test_mean,
            r.test_std,
            r.rel.map(|v| format!("{v:.4}")).unwrap_or_default(),
            r.com.map(|v| format!("{v:.1}")).unwrap_or_default(),
        );
    }
    s
}

/// Per-round means over seeds, and cumulative traffic for federated runs.
pub fn curves(rows: &[MetricRow]) -> (String, String) {
    let mut acc: BTreeMap<(String, String, usize), (Setting, f64, f64, f64, usize)> = BTreeMap::new();
    let mut order: Vec<(String, String, usize)> = Vec::new();
    for run in runs(rows) {
        let key_s = run.setting.key();
        let mut bytes = 0u64;
        for r in &run.rows {
            bytes += r.bytes_up + r.bytes_down;
            let key = (run.method.to_string(), key_s.clone(), r.round);
            let e = acc.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                (run.setting.clone(), 0.0, 0.0, 0.0, 0)
            });
            e.1 += r.val;
            e.2 += r.test;
            e.3 += bytes as f64 / 1e6;
            e.4 += 1;
        }
    }
    let mut curve = format!("{CURVES_HEADER}\n");
    let mut budget = format!("{BUDGET_HEADER}\n");
    for key in &order {
        let (s, val, test, mb, n) = &acc[key];
        let n = *n as f64;
        let _ = writeln!(
            curve,
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
            key.0,
            s.mode.as_str(),
            opt(s.alpha),
            s.scenario.as_deref().unwrap_or(""),
            opt(s.local_epochs),
            key.2,
            val / n,
            test / n
        );
        if s.mode == RunMode::Federated {
            let _ = writeln!(
                budget,
                "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.6}",
                key.0,
                opt(s.alpha),
                s.scenario.as_deref().unwrap_or(""),
                opt(s.local_epochs),
                key.2,
                mb / n,
                test / n
            );
        }
    }
    (curve, budget)
}

/// Reads `metrics.jsonl` under `dir` and writes the comparison table and plot data to `out`.
pub fn report(dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let path = dir.join("metrics.jsonl");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let rows = formats::parse_metrics(&text)?;
    if rows.is_empty() {
        return Err(CliError::Parse(format!("{} has no rows", path.display())));
    }
    let (curve, budget) = curves(&rows);
    let files = [
        (out.join("comparison.csv"), comparison_csv(&comparison(&rows))),
        (out.join("curves.tsv"), curve),
        (out.join("budget.tsv"), budget),
    ];
    for (p, body) in &files {
        write(p, body.as_bytes())?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

/// FT, BitFit, LoRA r=8 on q and v, and Adapter with reduction 64.
pub fn account_methods() -> Vec<DeltaSpec> {
    vec![
        DeltaSpec::full(),
        DeltaSpec::bitfit(),
        DeltaSpec::lora(8, 16.0, &[LoraTarget::Q, LoraTarget::V]),
        DeltaSpec::adapter(64),
    ]
}

pub fn load_shape(path: Option<&Path>) -> Result<ArchShape> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
        None => ROBERTA_BASE.to_string(),
    };
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("shape file: {e}")))
}

/// Cost CSV of `methods` on `shape` for `k` clients over `t` rounds.
pub fn account(shape: &ArchShape, methods: &[DeltaSpec], k: usize, t: usize) -> Result<String> {
    if shape.d_model == 0 || shape.n_layers == 0 || shape.bytes_per_scalar == 0 {
        return Err(CliError::Config("shape extents must be positive".into()));
    }
    if let Some(m) = methods.iter().find(|m| matches!(m.method, fedpet_core::delta::DeltaMethod::Adapter { reduction_factor: 0 })) {
        return Err(CliError::Config(format!("{m}: reduction factor must be positive")));
    }
    let reports: Vec<_> = methods.iter().map(|m| accounting::comm_budget(m, shape, k, t)).collect();
    Ok(accounting::cost_csv(&reports))
}
