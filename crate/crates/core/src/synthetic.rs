//! Planted-cluster datasets for end-to-end checks.
//!
//! Items belong to one of `num_clusters` clusters. Each modality view is a
//! random linear map of the item's cluster center plus item-specific and
//! view-specific Gaussian noise. Every user prefers one cluster and draws
//! most interactions from it, with Zipf-like popularity inside the cluster.

use ndarray::Array2;
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::{make_split, FeatureMatrix, IdMap, Interaction, InteractionTable, Modality, SplitRatios};
use crate::error::{Result, TmlpError};
use crate::itemgraph::SparseGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_items: usize,
    pub num_clusters: usize,
    pub num_users: usize,
    pub latent_dim: usize,
    pub visual_dim: usize,
    pub textual_dim: usize,
    /// Std of the per-item offset from its cluster center (centers are unit scale).
    pub item_noise: f64,
    /// Std of independent per-view noise added after projection.
    pub view_noise: f64,
    pub min_interactions: usize,
    pub max_interactions: usize,
    /// Share of a user's interactions drawn from the preferred cluster.
    pub purity: f64,
    /// Popularity exponent inside a cluster: weight of rank r is 1/(r+1)^s.
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_items: 500,
            num_clusters: 10,
            num_users: 2000,
            latent_dim: 16,
            visual_dim: 32,
            textual_dim: 24,
            item_noise: 0.3,
            view_noise: 1.0,
            min_interactions: 5,
            max_interactions: 8,
            purity: 0.9,
            popularity_skew: 1.0,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    /// Interactions with a train/val/test split.
    pub table: InteractionTable,
    pub visual: FeatureMatrix,
    pub textual: FeatureMatrix,
    pub item_cluster: Vec<u32>,
    pub user_cluster: Vec<u32>,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| std * rng.sample::<f64, _>(StandardNormal))
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.num_clusters == 0 || cfg.num_items < cfg.num_clusters || cfg.num_users == 0 {
        return Err(TmlpError::Config("synthetic sizes must satisfy items >= clusters > 0 and users > 0".into()));
    }
    if cfg.min_interactions == 0 || cfg.min_interactions > cfg.max_interactions {
        return Err(TmlpError::Config("need 0 < min_interactions <= max_interactions".into()));
    }
    if !(0.0..=1.0).contains(&cfg.purity) {
        return Err(TmlpError::Config(format!("purity {} outside [0, 1]", cfg.purity)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, k) = (cfg.num_items, cfg.num_clusters);
    let item_cluster: Vec<u32> = (0..n).map(|i| (i % k) as u32).collect();
    let centers = gaussian(k, cfg.latent_dim, 1.0, &mut rng);
    let offsets = gaussian(n, cfg.latent_dim, cfg.item_noise, &mut rng);
    let latent = Array2::from_shape_fn((n, cfg.latent_dim), |(i, d)| centers[[item_cluster[i] as usize, d]] + offsets[[i, d]]);
    let mut view = |dim: usize| {
        let proj = gaussian(cfg.latent_dim, dim, 1.0 / (cfg.latent_dim as f64).sqrt(), &mut rng);
        latent.dot(&proj) + gaussian(n, dim, cfg.view_noise, &mut rng)
    };
    let visual = FeatureMatrix::new(Modality::Visual, view(cfg.visual_dim))?;
    let textual = FeatureMatrix::new(Modality::Textual, view(cfg.textual_dim))?;

    let mut members: Vec<Vec<u32>> = vec![Vec::new(); k];
    for (i, &c) in item_cluster.iter().enumerate() {
        members[c as usize].push(i as u32);
    }
    for m in &mut members {
        m.shuffle(&mut rng);
    }
    let pop: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| {
            WeightedIndex::new((0..m.len()).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.popularity_skew)))
                .expect("non-empty cluster")
        })
        .collect();
    let mut user_cluster = Vec::with_capacity(cfg.num_users);
    let mut edges = Vec::new();
    for u in 0..cfg.num_users {
        let c = rng.gen_range(0..k);
        user_cluster.push(c as u32);
        let want = rng.gen_range(cfg.min_interactions..=cfg.max_interactions).min(n);
        let mut chosen: Vec<u32> = Vec::with_capacity(want);
        while chosen.len() < want {
            let item = if rng.gen_bool(cfg.purity) {
                members[c][pop[c].sample(&mut rng)]
            } else {
                rng.gen_range(0..n as u32)
            };
            if !chosen.contains(&item) {
                chosen.push(item);
            }
        }
        edges.extend(chosen.into_iter().map(|item| Interaction {
            user: u as u32,
            item,
            split: None,
        }));
    }
    let users = IdMap::from_ordered((0..cfg.num_users).map(|u| u.to_string()).collect());
    let items = IdMap::from_ordered((0..n).map(|i| i.to_string()).collect());
    let raw = InteractionTable::new(users, items, edges)?;
    let table = make_split(&raw, SplitRatios::default(), cfg.seed)?;
    Ok(SyntheticData {
        table,
        visual,
        textual,
        item_cluster,
        user_cluster,
    })
}

/// Replaces each edge, with probability `fraction`, by an edge to a random
/// item of another cluster that the row does not already point to. Weights
/// are kept. Returns the new graph and the number of planted edges.
pub fn plant_cross_cluster_noise<R: Rng + ?Sized>(
    graph: &SparseGraph,
    item_cluster: &[u32],
    fraction: f64,
    rng: &mut R,
) -> Result<(SparseGraph, usize)> {
    if item_cluster.len() != graph.num_nodes() {
        return Err(TmlpError::NodeCount {
            left: graph.num_nodes(),
            right: item_cluster.len(),
        });
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(TmlpError::InvalidArgument(format!("noise fraction {fraction} outside [0, 1]")));
    }
    let n = graph.num_nodes();
    let mut planted = 0;
    let mut rows = Vec::with_capacity(n);
    for m in 0..n {
        let mut row: Vec<(u32, f64)> = graph.row(m).collect();
        let mut taken: Vec<u32> = row.iter().map(|e| e.0).collect();
        for entry in &mut row {
            if !rng.gen_bool(fraction) {
                continue;
            }
            let foreign: Vec<u32> = (0..n as u32)
                .filter(|&c| item_cluster[c as usize] != item_cluster[m] && !taken.contains(&c))
                .collect();
            if let Some(&target) = foreign.choose(rng) {
                entry.0 = target;
                taken.push(target);
                planted += 1;
            }
        }
        row.sort_by_key(|e| e.0);
        rows.push(row);
    }
    Ok((SparseGraph::from_rows(rows)?, planted))
}

/// Share of edges whose endpoints sit in the same cluster.
pub fn intra_cluster_fraction(graph: &SparseGraph, item_cluster: &[u32]) -> f64 {
    let total = graph.num_edges();
    if total == 0 {
        return 0.0;
    }
    let same = graph
        .edges()
        .filter(|&(m, n, _)| item_cluster[m as usize] == item_cluster[n as usize])
        .count();
    same as f64 / total as f64
}
