use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::SparseGraph;
use crate::datasets::FeatureMatrix;
use crate::error::{Result, TmlpError};

/// Weight given to retained kNN edges.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeWeighting {
    /// Every retained edge weighs 1.
    #[default]
    Binary,
    /// Retained edges keep their cosine similarity, clamped at 0.
    Cosine,
}

const ROW_BLOCK: usize = 256;

/// Directed kNN graph over items: row `m` holds the `k` items most
/// cosine-similar to `m`, self excluded. Ties go to the lower index.
pub fn build_knn_graph(features: &FeatureMatrix, k: usize, weighting: EdgeWeighting) -> Result<SparseGraph> {
    let n = features.num_items();
    if k == 0 {
        return Err(TmlpError::InvalidArgument("kNN size must be at least 1".into()));
    }
    if k >= n {
        return Err(TmlpError::InvalidArgument(format!(
            "kNN size {k} needs more than {n} items"
        )));
    }
    let mut unit: Array2<f64> = features.values.clone();
    for mut row in unit.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let unit_t = unit.t();
    let mut rows = Vec::with_capacity(n);
    let mut order: Vec<u32> = Vec::with_capacity(n);
    for start in (0..n).step_by(ROW_BLOCK) {
        let end = (start + ROW_BLOCK).min(n);
        let sims = unit.slice(s![start..end, ..]).dot(&unit_t);
        for (offset, sim_row) in sims.axis_iter(Axis(0)).enumerate() {
            let m = start + offset;
            order.clear();
            order.extend((0..n as u32).filter(|&c| c as usize != m));
            let by_rank = |a: &u32, b: &u32| {
                sim_row[*b as usize]
                    .total_cmp(&sim_row[*a as usize])
                    .then(a.cmp(b))
            };
            order.select_nth_unstable_by(k - 1, by_rank);
            let row = order[..k]
                .iter()
                .map(|&c| {
                    let w = match weighting {
                        EdgeWeighting::Binary => 1.0,
                        EdgeWeighting::Cosine => sim_row[c as usize].max(0.0),
                    };
                    (c, w)
                })
                .collect();
            rows.push(row);
        }
    }
    SparseGraph::from_rows(rows)
}
