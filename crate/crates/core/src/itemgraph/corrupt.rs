use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SparseGraph;
use crate::error::{Result, TmlpError};

/// Replaces each edge independently with probability `epsilon` by a noise
/// edge from the same source to a uniformly drawn node that is neither the
/// source nor any of its original or already-drawn targets. The noise edge
/// carries the replaced weight, so out-degrees are preserved. An edge is
/// kept when its row has no eligible target left.
///
/// Returns the corrupted graph and the number of replaced edges.
pub fn corrupt_graph(graph: &SparseGraph, epsilon: f64, seed: u64) -> Result<(SparseGraph, usize)> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(TmlpError::InvalidArgument(format!("corruption ratio {epsilon} outside [0, 1]")));
    }
    let n = graph.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut replaced = 0usize;
    let mut rows = Vec::with_capacity(n);
    for m in 0..n {
        let mut taken: HashSet<u32> = graph.row_cols(m).iter().copied().collect();
        taken.insert(m as u32);
        let mut row = Vec::with_capacity(graph.out_degree(m));
        for (c, w) in graph.row(m) {
            // Draw even when epsilon is 0 or 1 so the stream is independent of the value.
            let replace = rng.gen::<f64>() < epsilon;
            if replace && taken.len() < n {
                let target = draw_free(&mut rng, n, &taken);
                taken.insert(target);
                row.push((target, w));
                replaced += 1;
            } else {
                row.push((c, w));
            }
        }
        rows.push(row);
    }
    Ok((SparseGraph::from_rows(rows)?, replaced))
}

fn draw_free<R: Rng + ?Sized>(rng: &mut R, n: usize, taken: &HashSet<u32>) -> u32 {
    if taken.len() * 2 < n {
        loop {
            let t = rng.gen_range(0..n as u32);
            if !taken.contains(&t) {
                return t;
            }
        }
    }
    let free: Vec<u32> = (0..n as u32).filter(|t| !taken.contains(t)).collect();
    free[rng.gen_range(0..free.len())]
}
