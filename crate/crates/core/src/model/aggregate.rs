use std::sync::Arc;

use ndarray::{s, Array2};

use crate::datasets::InteractionTable;
use crate::error::{Result, TmlpError};
use crate::numcore::{CustomOp, Tensor2};

/// Symmetrically normalized user–item adjacency over `users + items` nodes
/// (users first): entry (u, U+i) = (U+i, u) = 1/√(|N_u|·|N_i|).
#[derive(Clone, Debug)]
pub struct BipartiteAdj {
    num_users: usize,
    num_items: usize,
    offsets: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
}

impl BipartiteAdj {
    pub fn from_edges(num_users: usize, num_items: usize, edges: &[(u32, u32)]) -> Result<Self> {
        let n = num_users + num_items;
        let mut deg = vec![0usize; n];
        for &(u, i) in edges {
            if u as usize >= num_users || i as usize >= num_items {
                return Err(TmlpError::InvalidArgument(format!(
                    "interaction ({u}, {i}) outside {num_users}×{num_items}"
                )));
            }
            deg[u as usize] += 1;
            deg[num_users + i as usize] += 1;
        }
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for &(u, i) in edges {
            let (a, b) = (u as usize, num_users + i as usize);
            let w = 1.0 / ((deg[a] * deg[b]) as f64).sqrt();
            rows[a].push((b as u32, w));
            rows[b].push((a as u32, w));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut cols = Vec::with_capacity(2 * edges.len());
        let mut weights = Vec::with_capacity(2 * edges.len());
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            for (c, w) in row {
                cols.push(c);
                weights.push(w);
            }
            offsets.push(cols.len());
        }
        Ok(Self {
            num_users,
            num_items,
            offsets,
            cols,
            weights,
        })
    }

    /// Adjacency of the table's train interactions.
    pub fn from_table(table: &InteractionTable) -> Result<Self> {
        Self::from_edges(table.num_users(), table.num_items(), table.train_edges())
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    /// `Â·x`; rows of isolated nodes come out zero.
    pub fn spmm(&self, x: &Tensor2) -> Tensor2 {
        let mut out = Array2::zeros(x.dim());
        for r in 0..self.num_nodes() {
            let mut dst = out.row_mut(r);
            for k in self.offsets[r]..self.offsets[r + 1] {
                dst.scaled_add(self.weights[k], &x.row(self.cols[k] as usize));
            }
        }
        out
    }

    /// `Σ_{l=0..L} Âˡ·x`.
    pub fn layer_sum(&self, x: &Tensor2, layers: usize) -> Tensor2 {
        let mut total = x.clone();
        let mut cur = x.clone();
        for _ in 0..layers {
            cur = self.spmm(&cur);
            total += &cur;
        }
        total
    }
}

/// LightGCN readout as a tape op over the stacked `[users; items]` matrix.
/// `Â` is symmetric, so the backward pass is the same layer sum.
pub(crate) struct Propagate {
    pub adj: Arc<BipartiteAdj>,
    pub layers: usize,
}

impl CustomOp for Propagate {
    fn name(&self) -> &'static str {
        "lightgcn_propagate"
    }

    fn forward(&self, inputs: &[&Tensor2]) -> Result<Tensor2> {
        let x = inputs[0];
        if x.nrows() != self.adj.num_nodes() {
            return Err(TmlpError::Shape {
                op: "lightgcn_propagate",
                left: x.dim(),
                right: (self.adj.num_nodes(), x.ncols()),
            });
        }
        Ok(self.adj.layer_sum(x, self.layers))
    }

    fn backward(&self, _inputs: &[&Tensor2], _output: &Tensor2, grad: &Tensor2) -> Vec<Option<Tensor2>> {
        vec![Some(self.adj.layer_sum(grad, self.layers))]
    }
}

/// Layer-summed LightGCN representations `(z_u, z_i)` from initial user and
/// item representations.
pub fn aggregate(h_users: &Tensor2, h_items: &Tensor2, adj: &BipartiteAdj, layers: usize) -> Result<(Tensor2, Tensor2)> {
    if h_users.nrows() != adj.num_users() || h_items.nrows() != adj.num_items() || h_users.ncols() != h_items.ncols() {
        return Err(TmlpError::Shape {
            op: "aggregate",
            left: h_users.dim(),
            right: h_items.dim(),
        });
    }
    let stacked = ndarray::concatenate(ndarray::Axis(0), &[h_users.view(), h_items.view()]).expect("cols checked");
    let z = adj.layer_sum(&stacked, layers);
    let u = adj.num_users();
    Ok((z.slice(s![..u, ..]).to_owned(), z.slice(s![u.., ..]).to_owned()))
}
