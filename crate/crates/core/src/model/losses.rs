use std::collections::HashMap;

use log::warn;
use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TmlpError};
use crate::itemgraph::SparseGraph;
use crate::numcore::{cosine_sim, CustomOp, Tape, Tensor2, Var};

/// `−ln σ(x)`, stable for large |x|.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.dot(&b)
}

/// Mean BPR loss over `(u, i, j)` triples with inner-product scores.
pub fn bpr_loss(z_users: &Tensor2, z_items: &Tensor2, triples: &[(u32, u32, u32)]) -> Result<f64> {
    if triples.is_empty() {
        return Err(TmlpError::InvalidArgument("BPR loss over an empty batch".into()));
    }
    let total: f64 = triples
        .iter()
        .map(|&(u, i, j)| {
            let zu = z_users.row(u as usize);
            neg_log_sigmoid(dot(zu, z_items.row(i as usize)) - dot(zu, z_items.row(j as usize)))
        })
        .sum();
    Ok(total / triples.len() as f64)
}

/// BPR loss as a tape op on the stacked `[users; items]` representation.
pub(crate) struct BprOp {
    pub triples: Vec<(u32, u32, u32)>,
    pub num_users: usize,
}

impl CustomOp for BprOp {
    fn name(&self) -> &'static str {
        "bpr_loss"
    }

    fn forward(&self, inputs: &[&Tensor2]) -> Result<Tensor2> {
        let z = inputs[0];
        if self.triples.is_empty() {
            return Err(TmlpError::InvalidArgument("BPR loss over an empty batch".into()));
        }
        let off = self.num_users;
        let total: f64 = self
            .triples
            .iter()
            .map(|&(u, i, j)| {
                let zu = z.row(u as usize);
                neg_log_sigmoid(dot(zu, z.row(off + i as usize)) - dot(zu, z.row(off + j as usize)))
            })
            .sum();
        Ok(Array2::from_elem((1, 1), total / self.triples.len() as f64))
    }

    fn backward(&self, inputs: &[&Tensor2], _output: &Tensor2, grad: &Tensor2) -> Vec<Option<Tensor2>> {
        let z = inputs[0];
        let off = self.num_users;
        let scale = grad[[0, 0]] / self.triples.len() as f64;
        let mut gz = Array2::zeros(z.dim());
        for &(u, i, j) in &self.triples {
            let (u, i, j) = (u as usize, off + i as usize, off + j as usize);
            let diff = dot(z.row(u), z.row(i)) - dot(z.row(u), z.row(j));
            // d/dx −ln σ(x) = −σ(−x)
            let g = -sigmoid(-diff) * scale;
            let item_gap = &z.row(i) - &z.row(j);
            gz.row_mut(u).scaled_add(g, &item_gap);
            gz.row_mut(i).scaled_add(g, &z.row(u));
            gz.row_mut(j).scaled_add(-g, &z.row(u));
        }
        vec![Some(gz)]
    }
}

/// Items of one neighborhood-alignment batch with their pairwise
/// supervision weights `w[a·B + b] = Ā(items[a], items[b])` (zero diagonal).
#[derive(Clone, Debug, PartialEq)]
pub struct NaBatch {
    pub items: Vec<u32>,
    pub weights: Vec<f64>,
}

impl NaBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Batch over explicit items, reading weights from `graph`.
    pub fn from_items(graph: &SparseGraph, items: Vec<u32>) -> Self {
        let pos: HashMap<u32, usize> = items.iter().enumerate().map(|(k, &it)| (it, k)).collect();
        let b = items.len();
        let mut weights = vec![0.0; b * b];
        for (a, &m) in items.iter().enumerate() {
            for (c, w) in graph.row(m as usize) {
                if let Some(&col) = pos.get(&c) {
                    if col != a {
                        weights[a * b + col] = w;
                    }
                }
            }
        }
        Self { items, weights }
    }

    /// Batch over explicit items with a dense weight matrix.
    pub fn with_weights(items: Vec<u32>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != items.len() * items.len() {
            return Err(TmlpError::InvalidArgument(format!(
                "{} weights for a batch of {}",
                weights.len(),
                items.len()
            )));
        }
        Ok(Self { items, weights })
    }
}

/// Where NA anchors come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// Uniform over items with at least one supervision edge.
    #[default]
    Independent,
    /// The positive items of the current BPR batch.
    BprBatch,
}

/// Samples up to `num_anchors` distinct anchors with out-degree ≥ 1 in
/// `graph`, then adds one random supervision neighbor per anchor so every
/// anchor has a non-zero numerator.
pub fn sample_na_batch<R: Rng + ?Sized>(
    graph: &SparseGraph,
    num_anchors: usize,
    mode: AnchorMode,
    bpr_positives: &[u32],
    rng: &mut R,
) -> NaBatch {
    let anchors: Vec<u32> = match mode {
        AnchorMode::Independent => {
            let eligible: Vec<u32> = (0..graph.num_nodes() as u32)
                .filter(|&m| graph.out_degree(m as usize) > 0)
                .collect();
            let take = num_anchors.min(eligible.len());
            sample(rng, eligible.len(), take).into_iter().map(|k| eligible[k]).collect()
        }
        AnchorMode::BprBatch => {
            let mut seen = std::collections::HashSet::new();
            bpr_positives
                .iter()
                .copied()
                .filter(|&i| graph.out_degree(i as usize) > 0 && seen.insert(i))
                .take(num_anchors)
                .collect()
        }
    };
    let mut items = anchors.clone();
    let mut present: std::collections::HashSet<u32> = anchors.iter().copied().collect();
    for &m in &anchors {
        let cols = graph.row_cols(m as usize);
        let pick = cols[rng.gen_range(0..cols.len())];
        if present.insert(pick) {
            items.push(pick);
        }
    }
    NaBatch::from_items(graph, items)
}

/// Neighborhood-alignment loss over the batch rows of `reps`:
/// −mean_m ln[Σ_{n≠m} w_mn·e^{sim(m,n)/τ} / Σ_{k≠m} e^{sim(m,k)/τ}],
/// cosine similarity, anchors with zero numerator excluded.
pub fn na_loss(reps: &Tensor2, batch: &NaBatch, tau: f64) -> Result<f64> {
    let op = NaOp::new(batch.clone(), tau)?;
    Ok(op.forward(&[reps])?[[0, 0]])
}

pub(crate) struct NaOp {
    batch: NaBatch,
    tau: f64,
}

struct NaPass {
    /// Unit rows of the batch.
    unit: Tensor2,
    norms: Vec<f64>,
    /// exp((s − 1)/τ); the shift cancels in every ratio.
    expo: Tensor2,
    num: Vec<f64>,
    den: Vec<f64>,
    included: usize,
    loss: f64,
}

impl NaOp {
    pub(crate) fn new(batch: NaBatch, tau: f64) -> Result<Self> {
        if batch.len() < 2 {
            return Err(TmlpError::InvalidArgument(format!(
                "NA batch needs at least 2 items, got {}",
                batch.len()
            )));
        }
        if tau <= 0.0 || !tau.is_finite() {
            return Err(TmlpError::InvalidArgument(format!("temperature {tau} must be > 0")));
        }
        Ok(Self { batch, tau })
    }

    fn pass(&self, reps: &Tensor2) -> Result<NaPass> {
        let b = self.batch.len();
        let d = reps.ncols();
        let mut unit = Array2::zeros((b, d));
        let mut norms = Vec::with_capacity(b);
        for (a, &item) in self.batch.items.iter().enumerate() {
            if item as usize >= reps.nrows() {
                return Err(TmlpError::InvalidArgument(format!(
                    "NA batch item {item} outside {} representations",
                    reps.nrows()
                )));
            }
            let row = reps.row(item as usize);
            let norm = row.dot(&row).sqrt();
            norms.push(norm);
            if norm > 1e-12 {
                unit.row_mut(a).assign(&(&row / norm));
            }
        }
        let sims = unit.dot(&unit.t());
        let expo = sims.mapv(|s| ((s - 1.0) / self.tau).exp());
        let w = &self.batch.weights;
        let (mut num, mut den) = (vec![0.0; b], vec![0.0; b]);
        let (mut total, mut included) = (0.0, 0usize);
        for a in 0..b {
            for k in 0..b {
                if k != a {
                    num[a] += w[a * b + k] * expo[[a, k]];
                    den[a] += expo[[a, k]];
                }
            }
            if num[a] > 0.0 {
                total -= (num[a] / den[a]).ln();
                included += 1;
            }
        }
        let loss = if included > 0 { total / included as f64 } else { 0.0 };
        Ok(NaPass {
            unit,
            norms,
            expo,
            num,
            den,
            included,
            loss,
        })
    }
}

impl CustomOp for NaOp {
    fn name(&self) -> &'static str {
        "na_loss"
    }

    fn forward(&self, inputs: &[&Tensor2]) -> Result<Tensor2> {
        let p = self.pass(inputs[0])?;
        if p.included == 0 {
            warn!("event=na_batch_without_positives size={}", self.batch.len());
        }
        Ok(Array2::from_elem((1, 1), p.loss))
    }

    fn backward(&self, inputs: &[&Tensor2], _output: &Tensor2, grad: &Tensor2) -> Vec<Option<Tensor2>> {
        let reps = inputs[0];
        let p = self.pass(reps).expect("validated in forward");
        let mut out = Array2::zeros(reps.dim());
        if p.included == 0 {
            return vec![Some(out)];
        }
        let b = self.batch.len();
        let w = &self.batch.weights;
        let scale = grad[[0, 0]] / (p.included as f64 * self.tau);
        // G[a][k] = dL/ds_ak
        let mut g = Array2::zeros((b, b));
        for a in 0..b {
            if p.num[a] <= 0.0 {
                continue;
            }
            for k in 0..b {
                if k != a {
                    let e = p.expo[[a, k]];
                    g[[a, k]] = scale * (e / p.den[a] - w[a * b + k] * e / p.num[a]);
                }
            }
        }
        // s_ak = u_a·u_k, so dL/du = (G + Gᵀ)·U
        let sym = &g + &g.t();
        let du = sym.dot(&p.unit);
        for (a, &item) in self.batch.items.iter().enumerate() {
            let norm = p.norms[a];
            if norm <= 1e-12 {
                continue;
            }
            let u = p.unit.row(a);
            let dua = du.row(a);
            let radial = u.dot(&dua);
            let mut dst = out.row_mut(item as usize);
            dst.scaled_add(1.0 / norm, &dua);
            dst.scaled_add(-radial / norm, &u);
        }
        vec![Some(out)]
    }
}

/// Records the NA loss of `reps` on the tape.
pub fn na_loss_on_tape(tape: &mut Tape<'_>, reps: Var, batch: &NaBatch, tau: f64) -> Result<Var> {
    tape.apply(Box::new(NaOp::new(batch.clone(), tau)?), &[reps])
}

/// `bpr + α·na`. With `α = 0` the NA term is not connected at all.
pub fn joint_loss(tape: &mut Tape<'_>, bpr: Var, na: Option<Var>, alpha: f64) -> Result<Var> {
    match na {
        Some(na) if alpha != 0.0 => {
            let weighted = tape.scale(na, alpha);
            tape.add(bpr, weighted)
        }
        _ => Ok(bpr),
    }
}

/// Plain cosine between two item rows, exposed for diagnostics.
pub fn item_similarity(reps: &Tensor2, m: usize, n: usize) -> f64 {
    cosine_sim(
        reps.row(m).as_slice().expect("standard layout"),
        reps.row(n).as_slice().expect("standard layout"),
    )
}
