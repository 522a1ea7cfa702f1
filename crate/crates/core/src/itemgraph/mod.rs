//! Item–item graphs: modality kNN construction, weighted fusion,
//! topological-similarity pruning and corruption injection.

mod corrupt;
mod io;
mod knn;
mod topology;

pub use corrupt::corrupt_graph;
pub use io::{read_graph, write_graph, write_graph_binary, GRAPH_BINARY_MAGIC, GRAPH_TEXT_MAGIC};
pub use knn::{build_knn_graph, EdgeWeighting};
pub use topology::{
    random_prune, topological_similarity, topological_similarity_with, tps_prune, tps_prune_with,
    LogBase, NodePruneStats, PruneReport, TS_TIE_TOLERANCE,
};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TmlpError};

/// Directed weighted graph in compressed-row layout. Columns within a row
/// are strictly increasing; weights are finite and non-negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseGraph {
    num_nodes: usize,
    row_offsets: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
}

impl SparseGraph {
    pub fn empty(num_nodes: usize) -> Self {
        Self {
            num_nodes,
            row_offsets: vec![0; num_nodes + 1],
            cols: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Builds from per-row adjacency lists, sorting each row.
    pub fn from_rows(rows: Vec<Vec<(u32, f64)>>) -> Result<Self> {
        let num_nodes = rows.len();
        let mut row_offsets = Vec::with_capacity(num_nodes + 1);
        row_offsets.push(0);
        let total: usize = rows.iter().map(Vec::len).sum();
        let mut cols = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        for (m, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|&(c, _)| c);
            for (k, &(c, w)) in row.iter().enumerate() {
                if c as usize >= num_nodes {
                    return Err(TmlpError::NodeIndex {
                        index: c as usize,
                        num_nodes,
                    });
                }
                if k > 0 && row[k - 1].0 == c {
                    return Err(TmlpError::InvalidArgument(format!(
                        "duplicate edge {m} -> {c}"
                    )));
                }
                if !w.is_finite() || w < 0.0 {
                    return Err(TmlpError::InvalidArgument(format!(
                        "edge {m} -> {c} has invalid weight {w}"
                    )));
                }
                cols.push(c);
                weights.push(w);
            }
            row_offsets.push(cols.len());
        }
        Ok(Self {
            num_nodes,
            row_offsets,
            cols,
            weights,
        })
    }

    pub fn from_edges(num_nodes: usize, edges: &[(u32, u32, f64)]) -> Result<Self> {
        let mut rows = vec![Vec::new(); num_nodes];
        for &(s, d, w) in edges {
            if s as usize >= num_nodes {
                return Err(TmlpError::NodeIndex {
                    index: s as usize,
                    num_nodes,
                });
            }
            rows[s as usize].push((d, w));
        }
        Self::from_rows(rows)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.cols.len()
    }

    pub fn out_degree(&self, m: usize) -> usize {
        self.row_offsets[m + 1] - self.row_offsets[m]
    }

    pub fn max_out_degree(&self) -> usize {
        (0..self.num_nodes).map(|m| self.out_degree(m)).max().unwrap_or(0)
    }

    /// Sorted out-neighbors of `m`.
    pub fn row_cols(&self, m: usize) -> &[u32] {
        &self.cols[self.row_offsets[m]..self.row_offsets[m + 1]]
    }

    pub fn row_weights(&self, m: usize) -> &[f64] {
        &self.weights[self.row_offsets[m]..self.row_offsets[m + 1]]
    }

    pub fn row(&self, m: usize) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.row_cols(m).iter().copied().zip(self.row_weights(m).iter().copied())
    }

    pub fn edges(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        (0..self.num_nodes).flat_map(move |m| self.row(m).map(move |(c, w)| (m as u32, c, w)))
    }

    pub fn weight(&self, m: usize, n: usize) -> Option<f64> {
        let cols = self.row_cols(m);
        cols.binary_search(&(n as u32))
            .ok()
            .map(|k| self.row_weights(m)[k])
    }

    pub(crate) fn check_node(&self, m: usize) -> Result<()> {
        if m >= self.num_nodes {
            return Err(TmlpError::NodeIndex {
                index: m,
                num_nodes: self.num_nodes,
            });
        }
        Ok(())
    }

    /// SHA-256 over the canonical binary encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.num_nodes as u64).to_le_bytes());
        for &o in &self.row_offsets {
            h.update((o as u64).to_le_bytes());
        }
        for &c in &self.cols {
            h.update(c.to_le_bytes());
        }
        for &w in &self.weights {
            h.update(w.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// `{m} ∪ out-neighbors(m)` inside a universe of `universe` nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhood {
    pub node: u32,
    /// Sorted, contains `node`.
    pub members: Vec<u32>,
    pub universe: usize,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn complement_size(&self) -> usize {
        self.universe - self.members.len()
    }

    pub fn contains(&self, n: u32) -> bool {
        self.members.binary_search(&n).is_ok()
    }
}

pub fn row_neighbors(graph: &SparseGraph, m: usize) -> Result<Neighborhood> {
    graph.check_node(m)?;
    let cols = graph.row_cols(m);
    let mut members = Vec::with_capacity(cols.len() + 1);
    let pos = cols.partition_point(|&c| (c as usize) < m);
    members.extend_from_slice(&cols[..pos]);
    if cols.get(pos) != Some(&(m as u32)) {
        members.push(m as u32);
    }
    members.extend_from_slice(&cols[pos..]);
    Ok(Neighborhood {
        node: m as u32,
        members,
        universe: graph.num_nodes,
    })
}

/// `β·A_v + (1−β)·A_t` over the union of both sparsity patterns. An entry
/// whose only source has coefficient zero (β = 0 or β = 1) is omitted, so
/// the endpoints reproduce the corresponding input exactly.
pub fn fuse_graphs(visual: &SparseGraph, textual: &SparseGraph, beta: f64) -> Result<SparseGraph> {
    if visual.num_nodes != textual.num_nodes {
        return Err(TmlpError::NodeCount {
            left: visual.num_nodes,
            right: textual.num_nodes,
        });
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(TmlpError::InvalidArgument(format!("beta_m {beta} outside [0, 1]")));
    }
    let n = visual.num_nodes;
    let mut rows = Vec::with_capacity(n);
    for m in 0..n {
        let (vc, vw) = (visual.row_cols(m), visual.row_weights(m));
        let (tc, tw) = (textual.row_cols(m), textual.row_weights(m));
        let (mut i, mut j) = (0, 0);
        let mut row = Vec::with_capacity(vc.len() + tc.len());
        while i < vc.len() || j < tc.len() {
            let take_v = j >= tc.len() || (i < vc.len() && vc[i] <= tc[j]);
            let take_t = i >= vc.len() || (j < tc.len() && tc[j] <= vc[i]);
            let col = if take_v { vc[i] } else { tc[j] };
            let wv = if take_v { Some(vw[i]) } else { None };
            let wt = if take_t { Some(tw[j]) } else { None };
            if (wv.is_some() && beta > 0.0) || (wt.is_some() && beta < 1.0) {
                let w = beta * wv.unwrap_or(0.0) + (1.0 - beta) * wt.unwrap_or(0.0);
                row.push((col, w));
            }
            i += take_v as usize;
            j += take_t as usize;
        }
        rows.push(row);
    }
    SparseGraph::from_rows(rows)
}
