//! Induction latency benchmark.

use std::time::Instant;

use nebula_core::subgraph::{self, NodeSet};
use nebula_core::{GraphStore, NodeId, SubgraphError};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BenchSelection {
    /// A fresh uniform sample of k nodes per run.
    Random,
    /// The k highest-PageRank nodes, every run.
    TopPagerank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub store: String,
    pub store_edge_count: u64,
    pub selection: BenchSelection,
    pub k: usize,
    pub seed: u64,
    pub runs: usize,
    pub latencies_ms: Vec<f64>,
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Nodes per induced subgraph (always k).
    pub induced_nodes: usize,
    /// Median induced edge count over the runs.
    pub induced_edges: usize,
    pub edges_per_run: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_rss_kb: Option<u64>,
}

/// Median of a sample; the mean of the middle two for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Nearest-rank percentile.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

fn sample(rng: &mut ChaCha8Rng, n: u64, k: usize) -> NodeSet {
    index::sample(rng, n as usize, k)
        .into_iter()
        .map(|i| i as NodeId)
        .collect()
}

/// One untimed warm run, then `runs` timed inductions. Timing covers the
/// induction only; sampling happens beforehand.
pub fn run(
    store: &GraphStore,
    k: usize,
    runs: usize,
    selection: BenchSelection,
    seed: u64,
) -> Result<BenchReport, SubgraphError> {
    if k == 0 {
        return Err(SubgraphError::ZeroK);
    }
    if k as u64 > store.node_count() {
        return Err(SubgraphError::KTooLarge {
            k,
            node_count: store.node_count(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fixed = match selection {
        BenchSelection::TopPagerank => Some(subgraph::select_top_k(store, "pagerank", k)?),
        BenchSelection::Random => None,
    };
    let next_set = |rng: &mut ChaCha8Rng| match &fixed {
        Some(s) => s.clone(),
        None => sample(rng, store.node_count(), k),
    };

    let warm = next_set(&mut rng);
    subgraph::induce(store, &warm)?;

    let mut latencies_ms = Vec::with_capacity(runs);
    let mut edges_per_run = Vec::with_capacity(runs);
    for _ in 0..runs {
        let set = next_set(&mut rng);
        let start = Instant::now();
        let sub = subgraph::induce(store, &set)?;
        latencies_ms.push(start.elapsed().as_secs_f64() * 1e3);
        edges_per_run.push(sub.edge_count());
    }
    let mut sorted_edges = edges_per_run.clone();
    sorted_edges.sort_unstable();
    Ok(BenchReport {
        store: store.path().display().to_string(),
        store_edge_count: store.edge_count(),
        selection,
        k,
        seed,
        runs,
        median_ms: median(&latencies_ms),
        p95_ms: percentile(&latencies_ms, 95.0),
        latencies_ms,
        induced_nodes: k,
        induced_edges: sorted_edges.get(sorted_edges.len() / 2).copied().unwrap_or(0),
        edges_per_run,
        peak_rss_kb: None,
    })
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let row = |out: &mut String, k: &str, v: String| out.push_str(&format!("{k:<18}{v}\n"));
        row(&mut out, "store", self.store.clone());
        row(&mut out, "store edges", self.store_edge_count.to_string());
        row(&mut out, "selection", format!("{:?}", self.selection).to_lowercase());
        row(&mut out, "k", self.k.to_string());
        row(&mut out, "runs", self.runs.to_string());
        row(&mut out, "median ms", format!("{:.3}", self.median_ms));
        row(&mut out, "p95 ms", format!("{:.3}", self.p95_ms));
        row(&mut out, "induced nodes", self.induced_nodes.to_string());
        row(&mut out, "induced edges", self.induced_edges.to_string());
        if let Some(kb) = self.peak_rss_kb {
            row(&mut out, "peak rss kb", kb.to_string());
        }
        out
    }
}
