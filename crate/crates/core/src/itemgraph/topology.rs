use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{row_neighbors, SparseGraph};
use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogBase {
    #[default]
    Natural,
    Two,
}

impl LogBase {
    fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Two => x.log2(),
        }
    }
}

/// Mutual information between the membership indicators of two
/// neighborhoods, from the sizes `a = |N_m|`, `b = |N_n|`, their overlap
/// `c` and the universe size `v`.
fn membership_mi(a: usize, b: usize, c: usize, v: usize, base: LogBase) -> f64 {
    let v = v as f64;
    let (a, b, c) = (a as f64, b as f64, c as f64);
    let cells = [
        (c, a, b),
        (a - c, a, v - b),
        (b - c, v - a, b),
        (v - a - b + c, v - a, v - b),
    ];
    cells
        .iter()
        .filter(|(joint, _, _)| *joint > 0.0)
        .map(|&(joint, mx, my)| (joint / v) * base.log(joint * v / (mx * my)))
        .sum::<f64>()
        .max(0.0)
}

fn overlap(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut c) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                c += 1;
                i += 1;
                j += 1;
            }
        }
    }
    c
}

/// Topological similarity of `m` and `n` in natural-log units; always ≥ 0.
pub fn topological_similarity(graph: &SparseGraph, m: usize, n: usize) -> Result<f64> {
    topological_similarity_with(graph, m, n, LogBase::Natural)
}

pub fn topological_similarity_with(graph: &SparseGraph, m: usize, n: usize, base: LogBase) -> Result<f64> {
    let nm = row_neighbors(graph, m)?;
    let nn = row_neighbors(graph, n)?;
    let c = overlap(&nm.members, &nn.members);
    Ok(membership_mi(nm.len(), nn.len(), c, graph.num_nodes(), base))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodePruneStats {
    pub kept: usize,
    pub dropped: usize,
    pub min_ts: Option<f64>,
    pub max_ts: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub k: usize,
    pub nodes: Vec<NodePruneStats>,
    pub ts_min: Option<f64>,
    pub ts_mean: Option<f64>,
    pub ts_max: Option<f64>,
}

impl PruneReport {
    pub fn kept_edges(&self) -> usize {
        self.nodes.iter().map(|n| n.kept).sum()
    }

    pub fn dropped_edges(&self) -> usize {
        self.nodes.iter().map(|n| n.dropped).sum()
    }

    /// `node,kept,dropped,min_ts,max_ts`; empty TS fields for rows without edges.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("node,kept,dropped,min_ts,max_ts\n");
        for (m, s) in self.nodes.iter().enumerate() {
            out.push_str(&format!(
                "{m},{},{},{},{}\n",
                s.kept,
                s.dropped,
                fmt(s.min_ts),
                fmt(s.max_ts)
            ));
        }
        out
    }
}

/// Relative gap below which two TS values count as tied. Equal
/// similarities reached through different overlap counts differ in the
/// last bits, and differently under each log base.
pub const TS_TIE_TOLERANCE: f64 = 1e-9;

/// Orders `(ts, weight, node)` candidates: higher TS first, with TS values
/// grouped into ties by [`TS_TIE_TOLERANCE`], then heavier weight, then
/// lower node index.
fn rank_candidates(scored: &mut [(f64, f64, u32)]) {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut groups = Vec::with_capacity(scored.len());
    let mut group = 0usize;
    for k in 0..scored.len() {
        if k > 0 {
            let (prev, cur) = (scored[k - 1].0, scored[k].0);
            if prev - cur > TS_TIE_TOLERANCE * prev.abs().max(cur.abs()) {
                group += 1;
            }
        }
        groups.push(group);
    }
    let mut keyed: Vec<(usize, (f64, f64, u32))> = groups.into_iter().zip(scored.iter().copied()).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then(b.1 .1.total_cmp(&a.1 .1)).then(a.1 .2.cmp(&b.1 .2)));
    for (dst, (_, c)) in scored.iter_mut().zip(keyed) {
        *dst = c;
    }
}

/// Keeps, per row, the `k` out-neighbors with the highest topological
/// similarity. Ties (within [`TS_TIE_TOLERANCE`]) prefer the heavier edge,
/// then the lower index. Kept edges retain their weights.
pub fn tps_prune(graph: &SparseGraph, k: usize) -> Result<(SparseGraph, PruneReport)> {
    tps_prune_with(graph, k, LogBase::Natural)
}

pub fn tps_prune_with(graph: &SparseGraph, k: usize, base: LogBase) -> Result<(SparseGraph, PruneReport)> {
    if k == 0 {
        return Err(crate::TmlpError::InvalidArgument("prune size K must be at least 1".into()));
    }
    let n = graph.num_nodes();
    let hoods: Vec<Vec<u32>> = (0..n)
        .map(|m| row_neighbors(graph, m).map(|h| h.members))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(n);
    let mut nodes = Vec::with_capacity(n);
    let (mut ts_min, mut ts_max, mut ts_sum, mut ts_count) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for m in 0..n {
        let mut scored: Vec<(f64, f64, u32)> = graph
            .row(m)
            .map(|(c, w)| {
                let cu = c as usize;
                let ts = membership_mi(
                    hoods[m].len(),
                    hoods[cu].len(),
                    overlap(&hoods[m], &hoods[cu]),
                    n,
                    base,
                );
                (ts, w, c)
            })
            .collect();
        let stats_min = scored.iter().map(|s| s.0).reduce(f64::min);
        let stats_max = scored.iter().map(|s| s.0).reduce(f64::max);
        for s in &scored {
            ts_min = ts_min.min(s.0);
            ts_max = ts_max.max(s.0);
            ts_sum += s.0;
            ts_count += 1;
        }
        rank_candidates(&mut scored);
        let keep = k.min(scored.len());
        nodes.push(NodePruneStats {
            kept: keep,
            dropped: scored.len() - keep,
            min_ts: stats_min,
            max_ts: stats_max,
        });
        rows.push(scored[..keep].iter().map(|&(_, w, c)| (c, w)).collect());
    }
    let report = PruneReport {
        k,
        nodes,
        ts_min: (ts_count > 0).then_some(ts_min),
        ts_mean: (ts_count > 0).then(|| ts_sum / ts_count as f64),
        ts_max: (ts_count > 0).then_some(ts_max),
    };
    Ok((SparseGraph::from_rows(rows)?, report))
}

/// Keeps a uniformly random subset of `min(k, out-degree)` edges per row.
pub fn random_prune<R: Rng + ?Sized>(graph: &SparseGraph, k: usize, rng: &mut R) -> Result<SparseGraph> {
    let rows = (0..graph.num_nodes())
        .map(|m| {
            let row: Vec<(u32, f64)> = graph.row(m).collect();
            if row.len() <= k {
                return row;
            }
            sample(rng, row.len(), k).into_iter().map(|i| row[i]).collect()
        })
        .collect();
    SparseGraph::from_rows(rows)
}
