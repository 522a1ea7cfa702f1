//! All-ranking top-N evaluation.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::datasets::{InteractionTable, Split};
use crate::error::{Result, TmlpError};
use crate::numcore::Tensor2;

pub const DEFAULT_CUTOFFS: [usize; 2] = [10, 20];
const USER_BLOCK: usize = 512;

/// Higher score first, ties to the lower item index. NaN ranks last.
fn ranks_before(a: (f64, u32), b: (f64, u32)) -> Ordering {
    let key = |s: f64| if s.is_nan() { f64::NEG_INFINITY } else { s };
    key(b.0).total_cmp(&key(a.0)).then(a.1.cmp(&b.1))
}

/// Top-`n` item indices of one user's scores with `masked` (sorted) removed.
pub fn rank_top_n(scores: ArrayView1<f64>, masked: &[u32], n: usize) -> Vec<u32> {
    let mut cand: Vec<(f64, u32)> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| masked.binary_search(&(*i as u32)).is_err())
        .map(|(i, &s)| (s, i as u32))
        .collect();
    let n = n.min(cand.len());
    if n == 0 {
        return Vec::new();
    }
    if n < cand.len() {
        cand.select_nth_unstable_by(n - 1, |a, b| ranks_before(*a, *b));
        cand.truncate(n);
    }
    cand.sort_unstable_by(|a, b| ranks_before(*a, *b));
    cand.into_iter().map(|(_, i)| i).collect()
}

/// `|top-n ∩ relevant| / |relevant|`; `None` when nothing is relevant.
pub fn recall_at(ranked: &[u32], relevant: &[u32], n: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = ranked.iter().take(n).filter(|i| relevant.contains(i)).count();
    Some(hits as f64 / relevant.len() as f64)
}

/// Binary-relevance NDCG with log2 discounts; `None` when nothing is relevant.
pub fn ndcg_at(ranked: &[u32], relevant: &[u32], n: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let discount = |p: usize| 1.0 / ((p + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(n)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(p, _)| discount(p))
        .sum();
    let idcg: f64 = (0..n.min(relevant.len())).map(discount).sum();
    Some(if idcg > 0.0 { dcg / idcg } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Recall,
    Ndcg,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Recall => "recall",
            Metric::Ndcg => "ndcg",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: Metric,
    pub n: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub split: Split,
    /// Users with at least one relevant item in the split.
    pub users: usize,
    /// Whether validation items were excluded from the test ranking.
    pub mask_validation: bool,
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn get(&self, metric: Metric, n: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric && r.n == n).map(|r| r.value)
    }

    pub fn recall(&self, n: usize) -> f64 {
        self.get(Metric::Recall, n).unwrap_or(f64::NAN)
    }

    pub fn ndcg(&self, n: usize) -> f64 {
        self.get(Metric::Ndcg, n).unwrap_or(f64::NAN)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,metric,N,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", self.split.as_str(), r.metric.as_str(), r.n, r.value);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| TmlpError::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| TmlpError::io(path, e))
    }
}

/// Ranks every item for each user with relevant items in `split` and
/// averages Recall@N and NDCG@N. Train items are always masked; validation
/// items are masked as well when `split` is test.
pub fn evaluate(
    z_users: &Tensor2,
    z_items: &Tensor2,
    table: &InteractionTable,
    split: Split,
    cutoffs: &[usize],
) -> Result<MetricTable> {
    if split == Split::Train {
        return Err(TmlpError::InvalidArgument("evaluation split must be val or test".into()));
    }
    if z_users.nrows() != table.num_users() || z_items.nrows() != table.num_items() || z_users.ncols() != z_items.ncols() {
        return Err(TmlpError::Shape {
            op: "evaluate",
            left: z_users.dim(),
            right: z_items.dim(),
        });
    }
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(TmlpError::InvalidArgument(format!("cutoffs {cutoffs:?} must be non-empty and positive")));
    }
    let relevant = table.items_by_user(split);
    let val = (split == Split::Test).then(|| table.items_by_user(Split::Val));
    let users: Vec<usize> = (0..table.num_users()).filter(|&u| !relevant[u].is_empty()).collect();
    if users.is_empty() {
        return Err(TmlpError::InvalidArgument(format!("split {} has no interactions", split.as_str())));
    }
    let max_n = *cutoffs.iter().max().expect("non-empty");
    let mut recall_sum = vec![0.0; cutoffs.len()];
    let mut ndcg_sum = vec![0.0; cutoffs.len()];
    for block in users.chunks(USER_BLOCK) {
        let rows: Vec<usize> = block.to_vec();
        let zu = z_users.select(ndarray::Axis(0), &rows);
        let scores = zu.dot(&z_items.t());
        for (k, &u) in block.iter().enumerate() {
            let mut masked: Vec<u32> = table.train_items(u).to_vec();
            if let Some(val) = &val {
                masked.extend_from_slice(&val[u]);
                masked.sort_unstable();
                masked.dedup();
            }
            let ranked = rank_top_n(scores.slice(s![k, ..]), &masked, max_n);
            for (c, &n) in cutoffs.iter().enumerate() {
                recall_sum[c] += recall_at(&ranked, &relevant[u], n).expect("user has relevant items");
                ndcg_sum[c] += ndcg_at(&ranked, &relevant[u], n).expect("user has relevant items");
            }
        }
    }
    let count = users.len() as f64;
    let mut rows = Vec::with_capacity(2 * cutoffs.len());
    for (c, &n) in cutoffs.iter().enumerate() {
        rows.push(MetricRow {
            metric: Metric::Recall,
            n,
            value: recall_sum[c] / count,
        });
    }
    for (c, &n) in cutoffs.iter().enumerate() {
        rows.push(MetricRow {
            metric: Metric::Ndcg,
            n,
            value: ndcg_sum[c] / count,
        });
    }
    Ok(MetricTable {
        split,
        users: users.len(),
        mask_validation: split == Split::Test,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array1, Array2};
    use proptest::prelude::*;

    use super::*;
    use crate::datasets::{IdMap, Interaction};

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at(&[3, 1, 2], &[1, 3], 3), Some(1.0));
        assert_eq!(recall_at(&[3, 1, 2], &[0], 3), Some(0.0));
        assert_eq!(recall_at(&[4, 0, 9], &[0, 7], 10), Some(0.5));
        assert_eq!(recall_at(&[4, 0, 9], &[], 10), None);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at(&[5, 1], &[5], 10), Some(1.0));
        let got = ndcg_at(&[1, 5, 2], &[5], 10).unwrap();
        assert!((got - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert_eq!(ndcg_at(&[1, 5], &[5], 1), Some(0.0));
    }

    #[test]
    fn ndcg_can_drop_while_ideal_grows() {
        let a = ndcg_at(&[0, 9, 1], &[0, 1], 1).unwrap();
        let b = ndcg_at(&[0, 9, 1], &[0, 1], 2).unwrap();
        assert_eq!(a, 1.0);
        assert!(b < a);
    }

    #[test]
    fn ranking_masks_and_breaks_ties_by_index() {
        let scores = Array1::from(vec![0.5, 0.9, 0.5, 0.9, 0.1]);
        assert_eq!(rank_top_n(scores.view(), &[], 5), vec![1, 3, 0, 2, 4]);
        assert_eq!(rank_top_n(scores.view(), &[1, 2], 3), vec![3, 0, 4]);
        assert_eq!(rank_top_n(scores.view(), &[0, 1, 2, 3], 10), vec![4]);
        let nan = Array1::from(vec![f64::NAN, 0.0]);
        assert_eq!(rank_top_n(nan.view(), &[], 2), vec![1, 0]);
    }

    fn toy_table() -> InteractionTable {
        let users = IdMap::from_ordered((0..5).map(|u| u.to_string()).collect());
        let items = IdMap::from_ordered((0..6).map(|i| i.to_string()).collect());
        let e = |u: u32, i: u32, s: Split| Interaction { user: u, item: i, split: Some(s) };
        let edges = vec![
            e(0, 0, Split::Train),
            e(0, 1, Split::Val),
            e(0, 2, Split::Test),
            e(1, 3, Split::Train),
            e(1, 4, Split::Test),
            e(1, 5, Split::Test),
            e(2, 0, Split::Train),
            e(2, 5, Split::Val),
            e(3, 1, Split::Train),
            e(3, 0, Split::Test),
            e(4, 2, Split::Train),
        ];
        InteractionTable::new(users, items, edges).unwrap()
    }

    #[test]
    fn perfect_scores_give_ones() {
        let table = toy_table();
        // One-hot embeddings per item; users point at their test items.
        let zi = Array2::eye(6);
        let mut zu = Array2::zeros((5, 6));
        for (u, items) in table.items_by_user(Split::Test).iter().enumerate() {
            for &i in items {
                zu[[u, i as usize]] = 1.0;
            }
        }
        let m = evaluate(&zu, &zi, &table, Split::Test, &[1, 2, 10, 20]).unwrap();
        assert_eq!(m.users, 3);
        assert_eq!(m.ndcg(2), 1.0);
        assert_eq!(m.recall(20), 1.0);
        // user 1 has two test items, so recall@1 is 1/2 there.
        assert!((m.recall(1) - (1.0 + 0.5 + 1.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn toy_case_matches_hand_values() {
        let table = toy_table();
        let zi = Array2::eye(6);
        // Same preference order for everyone: 5 > 4 > 3 > 2 > 1 > 0.
        let zu = Array2::from_shape_fn((5, 6), |(_, i)| i as f64);
        let m = evaluate(&zu, &zi, &table, Split::Test, &[1, 2]).unwrap();
        // u0 masks {0,1}: ranked 5,4,.. test {2} at rank 4 → 0.
        // u1 masks {3}: ranked 5,4 → recall@1 0.5, @2 1.0; ndcg@1 1, @2 1.
        // u3 masks {1}: ranked 5,4,3,2,0 → test {0} rank 5 → 0.
        assert!((m.recall(1) - 0.5 / 3.0).abs() < 1e-12);
        assert!((m.recall(2) - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.ndcg(2) - 1.0 / 3.0).abs() < 1e-12);
        let v = evaluate(&zu, &zi, &table, Split::Val, &[1]).unwrap();
        // u0 masks {0}: top 5 vs val {1} → 0; u2 masks {0}: top 5 = val → 1.
        assert_eq!(v.recall(1), 0.5);
        assert!(!v.mask_validation);
        assert!(m.to_csv().starts_with("split,metric,N,value\ntest,recall,1,"));
    }

    #[test]
    fn empty_split_is_an_error() {
        let users = IdMap::from_ordered(vec!["a".into()]);
        let items = IdMap::from_ordered(vec!["x".into(), "y".into()]);
        let table = InteractionTable::new(
            users,
            items,
            vec![Interaction { user: 0, item: 0, split: Some(Split::Train) }],
        )
        .unwrap();
        let zu = array![[1.0]];
        let zi = array![[1.0], [0.0]];
        assert!(evaluate(&zu, &zi, &table, Split::Test, &[10]).is_err());
        assert!(evaluate(&zu, &zi, &table, Split::Train, &[10]).is_err());
    }

    proptest! {
        #[test]
        fn monotone_bounded_and_shift_invariant(
            scores in prop::collection::vec(-5i32..5, 2..12),
            rel_mask in prop::collection::vec(any::<bool>(), 12),
            shift in -100.0f64..100.0,
        ) {
            let n_items = scores.len();
            let scores = Array1::from(scores.iter().map(|&s| s as f64).collect::<Vec<_>>());
            let relevant: Vec<u32> = (0..n_items as u32).filter(|&i| rel_mask[i as usize]).collect();
            prop_assume!(!relevant.is_empty());
            let ranked = rank_top_n(scores.view(), &[], n_items);
            let shifted = rank_top_n((&scores + shift).view(), &[], n_items);
            let (mut prev_r, mut prev_g) = (0.0, 0.0);
            for n in 1..=n_items {
                let r = recall_at(&ranked, &relevant, n).unwrap();
                let g = ndcg_at(&ranked, &relevant, n).unwrap();
                prop_assert!((0.0..=1.0).contains(&r) && (0.0..=1.0 + 1e-12).contains(&g));
                prop_assert!(r >= prev_r);
                // the ideal DCG stops growing once n covers every relevant item
                if n > relevant.len() {
                    prop_assert!(g >= prev_g);
                }
                prop_assert_eq!(r, recall_at(&shifted, &relevant, n).unwrap());
                prop_assert_eq!(g, ndcg_at(&shifted, &relevant, n).unwrap());
                prev_r = r;
                prev_g = g;
            }
        }
    }
}
