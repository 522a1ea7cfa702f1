use std::sync::Arc;

use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::itemgraph::SparseGraph;
use crate::numcore::{cosine_sim, finite_diff_check, GradCheckConfig, ParamStore, Tape};

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// Independent NA oracle: direct loops over the definition.
fn na_oracle(reps: &Tensor2, items: &[u32], w: &[f64], tau: f64) -> f64 {
    let b = items.len();
    let sim = |a: usize, k: usize| {
        cosine_sim(
            reps.row(items[a] as usize).to_vec().as_slice(),
            reps.row(items[k] as usize).to_vec().as_slice(),
        )
    };
    let (mut total, mut count) = (0.0, 0);
    for a in 0..b {
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..b {
            if k == a {
                continue;
            }
            num += w[a * b + k] * (sim(a, k) / tau).exp();
            den += (sim(a, k) / tau).exp();
        }
        if num > 0.0 {
            total += -(num / den).ln();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn dense_adj(adj: &BipartiteAdj, edges: &[(u32, u32)]) -> Tensor2 {
    let (u, n) = (adj.num_users(), adj.num_nodes());
    let mut a = Array2::<f64>::zeros((n, n));
    for &(x, i) in edges {
        a[[x as usize, u + i as usize]] = 1.0;
        a[[u + i as usize, x as usize]] = 1.0;
    }
    let deg: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    for r in 0..n {
        for c in 0..n {
            if a[[r, c]] != 0.0 {
                a[[r, c]] /= (deg[r] * deg[c]).sqrt();
            }
        }
    }
    a
}

#[test]
fn bpr_equal_scores_is_ln2() {
    let z = array![[0.3, -0.2]];
    let items = array![[0.3, -0.2], [0.3, -0.2]];
    let loss = bpr_loss(&z, &items, &[(0, 0, 1)]).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn bpr_unit_margin() {
    let z = array![[1.0, 0.0]];
    let items = array![[1.0, 5.0], [0.0, 5.0]];
    let loss = bpr_loss(&z, &items, &[(0, 0, 1)]).unwrap();
    assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
}

#[test]
fn neg_log_sigmoid_is_stable() {
    assert!((neg_log_sigmoid(800.0)).abs() < 1e-300);
    assert!((neg_log_sigmoid(-800.0) - 800.0).abs() < 1e-9);
    for x in [-3.0, -0.5, 0.0, 0.7, 4.0] {
        let direct = -(1.0 / (1.0 + (-x as f64).exp())).ln();
        assert!((neg_log_sigmoid(x) - direct).abs() < 1e-12);
    }
}

#[test]
fn bpr_empty_batch_errors() {
    let z = array![[1.0]];
    assert!(bpr_loss(&z, &z, &[]).is_err());
}

#[test]
fn na_fully_connected_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let reps = random_matrix(5, 4, &mut rng);
    let items: Vec<u32> = (0..5).collect();
    let mut w = vec![1.0; 25];
    for a in 0..5 {
        w[a * 5 + a] = 0.0;
    }
    let batch = NaBatch::with_weights(items, w).unwrap();
    assert!(na_loss(&reps, &batch, 1.0).unwrap().abs() < 1e-12);
}

#[test]
fn na_three_item_hand_value() {
    // Orthogonal pair plus a shared direction: sims (0,1)=0, (0,2)=(1,2)=1/√2.
    let reps = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let w = vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let batch = NaBatch::with_weights(vec![0, 1, 2], w.clone()).unwrap();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    // anchors 0 and 1 each: −ln(e⁰ / (e⁰ + e^s)); anchor 2 has no positives.
    let expected = -(1.0 / (1.0 + s.exp())).ln();
    let got = na_loss(&reps, &batch, 1.0).unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    assert!((got - na_oracle(&reps, &[0, 1, 2], &w, 1.0)).abs() < 1e-12);
}

#[test]
fn na_pair_is_zero() {
    let reps = array![[1.0, 2.0], [-3.0, 0.5]];
    let batch = NaBatch::with_weights(vec![0, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    assert!(na_loss(&reps, &batch, 0.5).unwrap().abs() < 1e-12);
}

#[test]
fn na_needs_two_items_and_positive_tau() {
    let reps = array![[1.0]];
    let single = NaBatch::with_weights(vec![0], vec![0.0]).unwrap();
    assert!(na_loss(&reps, &single, 1.0).is_err());
    let reps = array![[1.0], [2.0]];
    let pair = NaBatch::with_weights(vec![0, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    assert!(na_loss(&reps, &pair, 0.0).is_err());
}

#[test]
fn na_without_positives_is_zero() {
    let reps = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let batch = NaBatch::with_weights(vec![0, 1, 2], vec![0.0; 9]).unwrap();
    assert_eq!(na_loss(&reps, &batch, 1.0).unwrap(), 0.0);
}

#[test]
fn na_matches_oracle_and_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let reps = random_matrix(12, 5, &mut rng);
    let items: Vec<u32> = vec![3, 0, 7, 11, 5, 9];
    let b = items.len();
    let w: Vec<f64> = (0..b * b)
        .map(|k| if k / b != k % b && rng.gen_bool(0.4) { rng.gen_range(0.2..1.0) } else { 0.0 })
        .collect();
    let batch = NaBatch::with_weights(items.clone(), w.clone()).unwrap();
    for tau in [0.2, 1.0, 3.0] {
        let got = na_loss(&reps, &batch, tau).unwrap();
        assert!((got - na_oracle(&reps, &items, &w, tau)).abs() < 1e-10);
    }
    let mut scaled = reps.clone();
    for (r, mut row) in scaled.rows_mut().into_iter().enumerate() {
        row *= 0.1 + r as f64;
    }
    let a = na_loss(&reps, &batch, 1.0).unwrap();
    let b2 = na_loss(&scaled, &batch, 1.0).unwrap();
    assert!((a - b2).abs() < 1e-12);
}

#[test]
fn na_batch_weights_follow_graph() {
    let g = SparseGraph::from_edges(4, &[(0, 1, 1.0), (1, 2, 0.5), (3, 0, 1.0)]).unwrap();
    let batch = NaBatch::from_items(&g, vec![1, 0, 2]);
    // row item 1: → 2 with 0.5; row item 0: → 1
    assert_eq!(batch.weights, vec![0.0, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn sampled_anchors_always_have_a_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut edges = Vec::new();
    for m in 0..40u32 {
        if m % 3 == 0 {
            continue;
        }
        for _ in 0..2 {
            let n = rng.gen_range(0..40u32);
            if n != m {
                edges.push((m, n, 1.0));
            }
        }
    }
    edges.sort_by_key(|e| (e.0, e.1));
    edges.dedup_by_key(|e| (e.0, e.1));
    let g = SparseGraph::from_edges(40, &edges).unwrap();
    for mode in [AnchorMode::Independent, AnchorMode::BprBatch] {
        let positives: Vec<u32> = (0..40).collect();
        let batch = sample_na_batch(&g, 8, mode, &positives, &mut rng);
        let b = batch.len();
        let mut seen = batch.items.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), b, "batch items must be distinct");
        // 26 eligible anchors, so the first 8 entries are anchors.
        for a in 0..8 {
            let row_sum: f64 = (0..b).map(|k| batch.weights[a * b + k]).sum();
            assert!(row_sum > 0.0);
        }
    }
}

#[test]
fn aggregation_with_zero_layers_is_identity() {
    let edges = [(0, 0), (1, 1), (1, 0)];
    let adj = BipartiteAdj::from_edges(2, 2, &edges).unwrap();
    let hu = array![[1.0, 2.0], [3.0, 4.0]];
    let hi = array![[5.0, 6.0], [7.0, 8.0]];
    let (zu, zi) = aggregate(&hu, &hi, &adj, 0).unwrap();
    assert_eq!(zu, hu);
    assert_eq!(zi, hi);
}

#[test]
fn aggregation_single_edge() {
    let adj = BipartiteAdj::from_edges(1, 1, &[(0, 0)]).unwrap();
    let hu = array![[1.0, -1.0]];
    let hi = array![[2.0, 3.0]];
    let (zu, zi) = aggregate(&hu, &hi, &adj, 1).unwrap();
    assert_eq!(zu, &hu + &hi);
    assert_eq!(zi, &hi + &hu);
    let (zu, _) = aggregate(&hu, &hi, &adj, 2).unwrap();
    assert_eq!(zu, &hu * 2.0 + &hi);
}

#[test]
fn aggregation_matches_dense_powers() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (nu, ni) = (7, 9);
    let mut edges: Vec<(u32, u32)> = (0..25).map(|_| (rng.gen_range(0..nu), rng.gen_range(0..ni))).collect();
    edges.sort_unstable();
    edges.dedup();
    let adj = BipartiteAdj::from_edges(nu as usize, ni as usize, &edges).unwrap();
    let dense = dense_adj(&adj, &edges);
    let hu = random_matrix(nu as usize, 4, &mut rng);
    let hi = random_matrix(ni as usize, 4, &mut rng);
    let x = ndarray::concatenate(ndarray::Axis(0), &[hu.view(), hi.view()]).unwrap();
    for layers in 0..4 {
        let mut expected = x.clone();
        let mut cur = x.clone();
        for _ in 0..layers {
            cur = dense.dot(&cur);
            expected += &cur;
        }
        let (zu, zi) = aggregate(&hu, &hi, &adj, layers).unwrap();
        let got = ndarray::concatenate(ndarray::Axis(0), &[zu.view(), zi.view()]).unwrap();
        let diff = (&got - &expected).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-10, "layers={layers} diff={diff}");
    }
}

fn toy_setup(modalities: Modalities, seed: u64) -> (TmlpModel, ModelInputs, SparseGraph) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nu, ni) = (5usize, 6usize);
    let mut edges = vec![(0, 0), (0, 1), (1, 1), (1, 2), (2, 3), (3, 4), (4, 5), (2, 0), (3, 2)];
    edges.sort_unstable();
    let adj = Arc::new(BipartiteAdj::from_edges(nu, ni, &edges).unwrap());
    let cfg = ModelConfig {
        num_users: nu,
        num_items: ni,
        visual_dim: 8,
        textual_dim: 6,
        hidden: 7,
        depth: 2,
        embed_dim: 5,
        gcn_layers: 2,
        dropout: 0.0,
        modalities,
    };
    let model = TmlpModel::new(cfg, &mut rng).unwrap();
    let inputs = ModelInputs {
        visual: Some(random_matrix(ni, 8, &mut rng)),
        textual: Some(random_matrix(ni, 6, &mut rng)),
        adj,
    };
    let item_graph = SparseGraph::from_edges(
        ni,
        &[(0, 1, 1.0), (1, 0, 1.0), (2, 3, 1.0), (3, 2, 1.0), (4, 5, 1.0), (5, 4, 1.0), (0, 2, 1.0)],
    )
    .unwrap();
    (model, inputs, item_graph)
}

#[test]
fn zero_fuser_gives_zero_item_content() {
    let (mut model, inputs, _) = toy_setup(Modalities::Both, 0);
    let (w, b) = model.fuser_params();
    model.store_mut().value_mut(w).fill(0.0);
    model.store_mut().value_mut(b).fill(0.0);
    let h = model.encode_items(&inputs).unwrap();
    assert!(h.iter().all(|&v| v == 0.0));
}

fn joint_value_and_grads(
    model: &TmlpModel,
    inputs: &ModelInputs,
    triples: &[(u32, u32, u32)],
    batch: Option<&NaBatch>,
    obj: &ObjectiveConfig,
) -> (f64, Vec<(crate::numcore::ParamId, Tensor2)>) {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = model.forward(&mut tape, inputs, true, &mut rng).unwrap();
    let loss = model.objective(&mut tape, &fwd, triples, batch, obj).unwrap();
    let grads = tape.backward(loss.total).unwrap();
    (tape.scalar(loss.total), grads.params().to_vec())
}

#[test]
fn alpha_zero_is_pure_bpr() {
    let (model, inputs, g) = toy_setup(Modalities::Both, 2);
    let triples = [(0, 0, 3), (1, 2, 5), (4, 5, 0)];
    let batch = NaBatch::from_items(&g, vec![0, 1, 2, 3]);
    let with = ObjectiveConfig { alpha: 0.0, tau: 1.0, per_modality_na: true };
    let (l1, g1) = joint_value_and_grads(&model, &inputs, &triples, Some(&batch), &with);
    let (l2, g2) = joint_value_and_grads(&model, &inputs, &triples, None, &with);
    assert_eq!(l1, l2);
    assert_eq!(g1.len(), g2.len());
    for ((a, ga), (b, gb)) in g1.iter().zip(&g2) {
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }
}

#[test]
fn joint_gradients_match_finite_differences() {
    for modalities in [Modalities::Both, Modalities::TextOnly, Modalities::VisualOnly] {
        let (model, inputs, g) = toy_setup(modalities, 5);
        let triples = [(0, 0, 3), (1, 2, 5), (4, 5, 0), (2, 3, 1)];
        let batch = NaBatch::from_items(&g, vec![0, 1, 2, 3, 4, 5]);
        let obj = ObjectiveConfig { alpha: 0.5, tau: 1.0, per_modality_na: true };
        let mut store: ParamStore = model.store().clone();
        let report = finite_diff_check(
            &mut store,
            |s| {
                let mut m = model.clone();
                m.store_mut().copy_values_from(s);
                Ok(joint_value_and_grads(&m, &inputs, &triples, Some(&batch), &obj))
            },
            GradCheckConfig {
                h: 1e-5,
                coords_per_param: 12,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{modalities:?}: {report:?}");
    }
}

#[test]
fn na_gradient_matches_finite_differences_small_tau() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let id = store.add("h", random_matrix(7, 3, &mut rng));
    let items = vec![6, 0, 2, 4, 5];
    let b = items.len();
    let w: Vec<f64> = (0..b * b).map(|k| if k / b != k % b && (k * 7) % 3 == 0 { 1.0 } else { 0.0 }).collect();
    let batch = NaBatch::with_weights(items, w).unwrap();
    let report = finite_diff_check(
        &mut store,
        |s| {
            let mut tape = Tape::new();
            let h = tape.param(s, id);
            let l = na_loss_on_tape(&mut tape, h, &batch, 0.3)?;
            let g = tape.backward(l)?;
            Ok((tape.scalar(l), g.params().to_vec()))
        },
        GradCheckConfig {
            h: 1e-6,
            coords_per_param: 64,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn predict_scores_are_inner_products() {
    let zu = array![[1.0, 2.0], [0.0, -1.0]];
    let zi = array![[3.0, 1.0], [1.0, 1.0], [0.5, 0.0]];
    let s = predict_scores(&zu, &zi).unwrap();
    assert_eq!(s, array![[5.0, 3.0, 0.5], [-1.0, -1.0, 0.0]]);
    assert!(predict_scores(&zu, &array![[1.0]]).is_err());
}

#[test]
fn model_rejects_mismatched_features() {
    let (model, mut inputs, _) = toy_setup(Modalities::Both, 1);
    inputs.visual = Some(Array2::zeros((6, 3)));
    assert!(model.embeddings(&inputs).is_err());
    inputs.visual = None;
    assert!(model.embeddings(&inputs).is_err());
    let (model, mut inputs, _) = toy_setup(Modalities::TextOnly, 1);
    inputs.visual = None;
    assert!(model.embeddings(&inputs).is_ok());
}

#[test]
fn na_three_items_with_fixed_cosines() {
    // Unit vectors with cos(0,1) = 0.9, cos(0,2) = cos(1,2) = 0.1.
    let y1 = (1.0f64 - 0.81).sqrt();
    let y2 = (0.1 - 0.09) / y1;
    let z2 = (1.0 - 0.01 - y2 * y2).sqrt();
    let reps = array![[1.0, 0.0, 0.0], [0.9, y1, 0.0], [0.1, y2, z2]];
    let w = vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let batch = NaBatch::with_weights(vec![0, 1, 2], w).unwrap();
    let expected = -(0.9f64.exp() / (0.9f64.exp() + 0.1f64.exp())).ln();
    assert!((na_loss(&reps, &batch, 1.0).unwrap() - expected).abs() < 1e-10);
}

#[test]
fn na_uniform_rescale() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let reps = random_matrix(6, 4, &mut rng);
    let g = SparseGraph::from_edges(6, &[(0, 1, 1.0), (1, 2, 0.1), (3, 4, 0.9), (5, 0, 1.0)]).unwrap();
    let batch = NaBatch::from_items(&g, (0..6).collect());
    let base = na_loss(&reps, &batch, 1.0).unwrap();
    for c in [1e-3, 0.5, 7.0, 1e4] {
        assert!((na_loss(&(&reps * c), &batch, 1.0).unwrap() - base).abs() < 1e-8);
    }
}

#[test]
fn joint_loss_arithmetic() {
    let mut tape = Tape::new();
    let bpr = tape.constant(array![[0.5]]);
    let na = tape.constant(array![[0.5]]);
    let total = joint_loss(&mut tape, bpr, Some(na), 1.0).unwrap();
    assert_eq!(tape.scalar(total), 1.0);
    let only = joint_loss(&mut tape, bpr, Some(na), 0.0).unwrap();
    assert_eq!(only, bpr);
}

#[test]
fn alpha_zero_leaves_na_only_parameter_untouched() {
    let mut store = ParamStore::new();
    let z = store.add("z", array![[1.0, 0.5], [0.2, -0.3], [0.4, 0.9]]);
    let probe = store.add("probe", array![[1.0, 0.0], [0.3, 0.8], [0.1, 0.2]]);
    let batch = NaBatch::with_weights(vec![0, 1, 2], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    for (alpha, expect_grad) in [(0.0, false), (0.3, true)] {
        let mut tape = Tape::new();
        let zv = tape.param(&store, z);
        let pv = tape.param(&store, probe);
        let bpr = tape
            .apply(Box::new(losses::BprOp { triples: vec![(0, 0, 1)], num_users: 1 }), &[zv])
            .unwrap();
        let na = na_loss_on_tape(&mut tape, pv, &batch, 1.0).unwrap();
        let total = joint_loss(&mut tape, bpr, Some(na), alpha).unwrap();
        let grads = tape.backward(total).unwrap();
        let g = grads.param(probe).map(|g| g.iter().any(|&v| v != 0.0)).unwrap_or(false);
        assert_eq!(g, expect_grad, "alpha={alpha}");
    }
}

#[test]
fn joint_gradient_is_linear_in_terms() {
    let (model, inputs, g) = toy_setup(Modalities::Both, 4);
    let triples = [(0, 0, 3), (1, 2, 5), (4, 5, 0)];
    let batch = NaBatch::from_items(&g, vec![0, 1, 2, 3, 4, 5]);
    let alpha = 0.7;
    let grads_for = |obj: ObjectiveConfig, which: u8| {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = model.forward(&mut tape, &inputs, true, &mut rng).unwrap();
        let l = model.objective(&mut tape, &fwd, &triples, Some(&batch), &obj).unwrap();
        let target = match which {
            0 => l.total,
            1 => l.bpr,
            _ => l.na.unwrap(),
        };
        let grads = tape.backward(target).unwrap();
        model.store().ids().map(|id| grads.param(id)).collect::<Vec<_>>()
    };
    let obj = ObjectiveConfig { alpha, tau: 1.0, per_modality_na: false };
    let (joint, bpr, na) = (grads_for(obj, 0), grads_for(obj, 1), grads_for(obj, 2));
    for ((j, b), n) in joint.iter().zip(&bpr).zip(&na) {
        let zero = || Array2::zeros(j.as_ref().or(b.as_ref()).or(n.as_ref()).unwrap().dim());
        let expected = b.clone().unwrap_or_else(zero) + n.clone().unwrap_or_else(zero) * alpha;
        let got = j.clone().unwrap_or_else(zero);
        let diff = (&got - &expected).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-12, "{diff}");
    }
}

#[test]
fn predict_scores_matches_pairwise_dots() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let zu = random_matrix(5, 3, &mut rng);
    let zi = random_matrix(5, 3, &mut rng);
    let s = predict_scores(&zu, &zi).unwrap();
    for u in 0..5 {
        for i in 0..5 {
            let d: f64 = (0..3).map(|k| zu[[u, k]] * zi[[i, k]]).sum();
            assert!((s[[u, i]] - d).abs() < 1e-14);
        }
    }
    let unit = array![[0.6, 0.8]];
    assert!(predict_scores(&unit, &array![[-0.8, 0.6]]).unwrap()[[0, 0]].abs() < 1e-15);
    assert!((predict_scores(&unit, &unit).unwrap()[[0, 0]] - 1.0).abs() < 1e-15);
}

proptest::proptest! {
    #[test]
    fn bpr_strictly_decreasing_in_gap(a in -30.0f64..30.0, step in 1e-3f64..5.0) {
        let z = array![[1.0]];
        let lo = bpr_loss(&z, &array![[a], [0.0]], &[(0, 0, 1)]).unwrap();
        let hi = bpr_loss(&z, &array![[a + step], [0.0]], &[(0, 0, 1)]).unwrap();
        proptest::prop_assert!(hi < lo);
    }
}
