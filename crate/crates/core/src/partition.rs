//! Dirichlet label-skew partitioning and heterogeneity diagnostics.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub alpha: f64,
    pub n_clients: usize,
    #[serde(default = "default_min")]
    pub min_per_client: usize,
    pub seed: u64,
}

fn default_min() -> usize {
    10
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.n_clients < 2 {
            return Err(Error::Config("at least two clients are required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub alpha: f64,
    pub seed: u64,
    pub n_labels: usize,
    /// Sorted example indices per client.
    pub clients: Vec<Vec<usize>>,
    /// Per-client label counts.
    pub histograms: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    /// Every index once, in one client.
    pub fn is_partition_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.clients.iter().flatten() {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }

    /// Line-oriented text: a `#` header with alpha, seed and client count, then
    /// `client_id<TAB>comma-separated indices` per client.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# alpha={}\tseed={}\tn_clients={}\n",
            self.alpha,
            self.seed,
            self.clients.len()
        );
        for (id, idx) in self.clients.iter().enumerate() {
            let joined: Vec<String> = idx.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{id}\t{}", joined.join(","));
        }
        s
    }

    /// Parses [`to_text`](Self::to_text) output; histograms are rebuilt from `labels`.
    pub fn from_text(text: &str, labels: &[usize], n_labels: usize) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty plan file".into()))?;
        let fields = header
            .strip_prefix("# ")
            .ok_or_else(|| Error::Format("plan header must start with '# '".into()))?;
        let mut alpha = None;
        let mut seed = None;
        let mut n_clients = None;
        for f in fields.split('\t') {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field {f:?}")))?;
            let bad = |_| Error::Format(format!("bad header value {f:?}"));
            match k {
                "alpha" => alpha = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
                "seed" => seed = Some(v.parse::<u64>().map_err(|e| bad(e.to_string()))?),
                "n_clients" => n_clients = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                _ => return Err(Error::Format(format!("unknown header field {k}"))),
            }
        }
        let (alpha, seed, n_clients) = match (alpha, seed, n_clients) {
            (Some(a), Some(s), Some(n)) => (a, s, n),
            _ => return Err(Error::Format("plan header is incomplete".into())),
        };
        let mut clients = Vec::with_capacity(n_clients);
        for (expect, line) in lines.enumerate() {
            let (id, rest) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("line {} has no tab", expect + 2)))?;
            if id.parse::<usize>().ok() != Some(expect) {
                return Err(Error::Format(format!("expected client {expect}, found {id:?}")));
            }
            let idx = if rest.is_empty() {
                Vec::new()
            } else {
                rest.split(',')
                    .map(|x| {
                        x.parse::<usize>()
                            .map_err(|_| Error::Format(format!("bad index {x:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            clients.push(idx);
        }
        if clients.len() != n_clients {
            return Err(Error::Format(format!(
                "header says {n_clients} clients, found {}",
                clients.len()
            )));
        }
        let histograms = histograms(&clients, labels, n_labels)?;
        Ok(PartitionPlan {
            alpha,
            seed,
            n_labels,
            clients,
            histograms,
        })
    }
}

fn histograms(clients: &[Vec<usize>], labels: &[usize], n_labels: usize) -> Result<Vec<Vec<usize>>> {
    clients
        .iter()
        .map(|idx| {
            let mut h = vec![0; n_labels];
            for &i in idx {
                let l = *labels
                    .get(i)
                    .ok_or_else(|| Error::Format(format!("index {i} out of range")))?;
                if l >= n_labels {
                    return Err(Error::Input(format!("label {l} out of range")));
                }
                h[l] += 1;
            }
            Ok(h)
        })
        .collect()
}

/// Per-class Dirichlet(α) proportions over clients, largest-remainder rounding,
/// then minimal rebalancing from the largest clients up to `min_per_client`.
pub fn partition_dirichlet(labels: &[usize], n_labels: usize, cfg: &PartitionConfig) -> Result<PartitionPlan> {
    cfg.validate()?;
    let c = cfg.n_clients;
    if labels.len() < c * cfg.min_per_client {
        return Err(Error::Config(format!(
            "{} examples cannot give {c} clients {} each",
            labels.len(),
            cfg.min_per_client
        )));
    }
    let mut r = rng::stream(cfg.seed, &[rng::PARTITION]);
    let gamma = Gamma::new(cfg.alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); c];

    for class in 0..n_labels {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut r);
        let mut p: Vec<f64> = (0..c).map(|_| gamma.sample(&mut r)).collect();
        let total: f64 = p.iter().sum();
        if total > 0.0 && total.is_finite() {
            p.iter_mut().for_each(|x| *x /= total);
        } else {
            let k = r.random_range(0..c);
            p = (0..c).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
        }
        let n = members.len();
        let exact: Vec<f64> = p.iter().map(|x| x * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut by_remainder: Vec<usize> = (0..c).collect();
        by_remainder.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &k in by_remainder.iter().take(n.saturating_sub(assigned)) {
            counts[k] += 1;
        }
        let mut start = 0;
        for (k, &cnt) in counts.iter().enumerate() {
            clients[k].extend_from_slice(&members[start..start + cnt]);
            start += cnt;
        }
    }

    for idx in clients.iter_mut() {
        idx.sort_unstable();
    }
    loop {
        let Some(recv) = (0..c)
            .filter(|&k| clients[k].len() < cfg.min_per_client)
            .min_by_key(|&k| (clients[k].len(), k))
        else {
            break;
        };
        let donor = (0..c)
            .max_by_key(|&k| (clients[k].len(), std::cmp::Reverse(k)))
            .expect("at least one client");
        if clients[donor].len() <= cfg.min_per_client {
            return Err(Error::Config("cannot satisfy min_per_client".into()));
        }
        let moved = clients[donor].pop().expect("donor is non-empty");
        let pos = clients[recv].partition_point(|&i| i < moved);
        clients[recv].insert(pos, moved);
    }

    let histograms = histograms(&clients, labels, n_labels)?;
    Ok(PartitionPlan {
        alpha: cfg.alpha,
        seed: cfg.seed,
        n_labels,
        clients,
        histograms,
    })
}

/// Jensen–Shannon distance (base-2) between two count vectors.
pub fn js_distance(a: &[usize], b: &[usize]) -> f64 {
    let na: usize = a.iter().sum();
    let nb: usize = b.iter().sum();
    if na == 0 || nb == 0 {
        return if na == nb { 0.0 } else { 1.0 };
    }
    let mut js = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let p = x as f64 / na as f64;
        let q = y as f64 / nb as f64;
        let m = 0.5 * (p + q);
        if p > 0.0 {
            js += 0.5 * p * (p / m).log2();
        }
        if q > 0.0 {
            js += 0.5 * q * (q / m).log2();
        }
    }
    js.clamp(0.0, 1.0).sqrt()
}

/// Pairwise distances between the clients' label distributions.
pub fn js_distance_matrix(plan: &PartitionPlan) -> Vec<Vec<f64>> {
    let h = &plan.histograms;
    let n = h.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = js_distance(&h[i], &h[j]);
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    m
}

/// Mean of the off-diagonal entries.
pub fn mean_off_diagonal(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    if n < 2 {
        return 0.0;
    }
    let total: f64 = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| m[i][j])
        .sum();
    total / (n * (n - 1)) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize, k: usize) -> Vec<usize> {
        (0..n).map(|i| i % k).collect()
    }

    fn cfg(alpha: f64, n_clients: usize, seed: u64) -> PartitionConfig {
        PartitionConfig {
            alpha,
            n_clients,
            min_per_client: 10,
            seed,
        }
    }

    #[test]
    fn exact_partition_and_minimum() {
        let l = labels(1000, 3);
        for seed in 0..5 {
            let p = partition_dirichlet(&l, 3, &cfg(0.1, 10, seed)).unwrap();
            assert!(p.is_partition_of(1000));
            assert!(p.sizes().iter().all(|&s| s >= 10));
            assert!(p.clients.iter().all(|c| c.windows(2).all(|w| w[0] < w[1])));
        }
    }

    #[test]
    fn infeasible_minimum_rejected() {
        let l = labels(50, 2);
        assert!(matches!(
            partition_dirichlet(&l, 2, &cfg(1.0, 10, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn deterministic() {
        let l = labels(600, 3);
        let a = partition_dirichlet(&l, 3, &cfg(1.0, 5, 3)).unwrap();
        assert_eq!(a, partition_dirichlet(&l, 3, &cfg(1.0, 5, 3)).unwrap());
    }

    #[test]
    fn js_extremes() {
        assert_eq!(js_distance(&[5, 5, 0], &[1, 1, 0]), 0.0);
        assert_eq!(js_distance(&[3, 0, 0], &[0, 2, 7]), 1.0);
        let d = js_distance(&[3, 1, 0], &[1, 3, 0]);
        assert!(d > 0.0 && d < 1.0);
    }

    #[test]
    fn matrix_symmetric_zero_diagonal() {
        let l = labels(900, 3);
        let p = partition_dirichlet(&l, 3, &cfg(0.5, 6, 1)).unwrap();
        let m = js_distance_matrix(&p);
        for i in 0..6 {
            assert_eq!(m[i][i], 0.0);
            for j in 0..6 {
                assert_eq!(m[i][j], m[j][i]);
                assert!((0.0..=1.0).contains(&m[i][j]));
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let l = labels(300, 3);
        let p = partition_dirichlet(&l, 3, &cfg(0.3, 4, 9)).unwrap();
        let text = p.to_text();
        assert!(text.starts_with("# alpha=0.3\tseed=9\tn_clients=4\n0\t"));
        assert_eq!(PartitionPlan::from_text(&text, &l, 3).unwrap(), p);
        assert!(PartitionPlan::from_text("0\t1,2", &l, 3).is_err());
    }
}
