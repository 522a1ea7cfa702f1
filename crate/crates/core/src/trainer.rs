//! Joint training loop, run manifests and the ablation variants.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{sample_bpr_triples, FeatureMatrix, InteractionTable, Split};
use crate::error::{Result, TmlpError};
use crate::evalmetrics::{evaluate, MetricTable, DEFAULT_CUTOFFS};
use crate::itemgraph::{random_prune, tps_prune, SparseGraph};
use crate::model::{
    sample_na_batch, AnchorMode, BipartiteAdj, Modalities, ModelConfig, ModelInputs, ObjectiveConfig, TmlpModel,
};
use crate::numcore::{read_checkpoint, write_checkpoint, AdamConfig, Tape};

/// How the fused item graph becomes the NA supervision graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    #[default]
    Tps,
    Random,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub depth: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub gcn_layers: usize,
    pub alpha: f64,
    /// Edges kept per item by pruning.
    pub prune_k: usize,
    pub weight_decay: f64,
    pub tau: f64,
    pub hops: usize,
    /// Visual share when fusing the modality graphs.
    pub beta: f64,
    /// Neighbors per item in each modality kNN graph.
    pub knn_k: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub dropout: f64,
    /// NA anchors per step; defaults to the BPR batch size.
    pub na_batch: Option<usize>,
    pub anchor_mode: AnchorMode,
    pub per_modality_na: bool,
    /// Validate every `eval_stride` epochs.
    pub eval_stride: usize,
    pub prune: PruneMode,
    pub modalities: Modalities,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 2048,
            depth: 2,
            hidden: 512,
            embed_dim: 64,
            gcn_layers: 2,
            alpha: 1.0,
            prune_k: 5,
            weight_decay: 0.0,
            tau: 1.0,
            hops: 1,
            beta: 0.1,
            knn_k: 10,
            max_epochs: 1000,
            patience: 20,
            seed: 2024,
            dropout: 0.0,
            na_batch: None,
            anchor_mode: AnchorMode::Independent,
            per_modality_na: false,
            eval_stride: 1,
            prune: PruneMode::Tps,
            modalities: Modalities::Both,
        }
    }
}

const LR_GRID: [f64; 4] = [1e-4, 5e-4, 1e-3, 5e-3];
const DECAY_GRID: [f64; 4] = [0.0, 1e-3, 1e-2, 1e-1];

impl TrainConfig {
    /// Rejects values the pipeline cannot run with.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TmlpError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.eval_stride == 0 {
            return bad("batch_size, max_epochs, patience and eval_stride must be positive".into());
        }
        if self.depth == 0 || self.hidden == 0 || self.embed_dim == 0 {
            return bad("depth, hidden and embed_dim must be positive".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if self.prune_k == 0 || self.knn_k == 0 {
            return bad("prune_k and knn_k must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.hops != 1 {
            return bad(format!("only 1-hop NA neighbors are supported, got hops = {}", self.hops));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta {} outside [0, 1]", self.beta));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.na_batch == Some(0) || self.na_batch == Some(1) {
            return bad("na_batch must be at least 2".into());
        }
        Ok(())
    }

    /// Values outside the published search grid. They are allowed but
    /// reported.
    pub fn off_grid(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !LR_GRID.contains(&self.lr) {
            out.push(format!("lr={}", self.lr));
        }
        if self.batch_size != 2048 {
            out.push(format!("batch_size={}", self.batch_size));
        }
        if !(2..=4).contains(&self.depth) {
            out.push(format!("depth={}", self.depth));
        }
        let tenths = self.alpha * 10.0;
        if self.alpha > 2.0 || (tenths - tenths.round()).abs() > 1e-9 {
            out.push(format!("alpha={}", self.alpha));
        }
        if !(3..=10).contains(&self.prune_k) {
            out.push(format!("prune_k={}", self.prune_k));
        }
        if !DECAY_GRID.contains(&self.weight_decay) {
            out.push(format!("weight_decay={}", self.weight_decay));
        }
        for (name, v, want) in [
            ("hidden", self.hidden, 512),
            ("embed_dim", self.embed_dim, 64),
            ("gcn_layers", self.gcn_layers, 2),
            ("knn_k", self.knn_k, 10),
        ] {
            if v != want {
                out.push(format!("{name}={v}"));
            }
        }
        if self.tau != 1.0 {
            out.push(format!("tau={}", self.tau));
        }
        if self.beta != 0.1 {
            out.push(format!("beta={}", self.beta));
        }
        out
    }

    pub fn na_batch_size(&self) -> usize {
        self.na_batch.unwrap_or(self.batch_size)
    }
}

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoNa,
    NoPrune,
    RandPrune,
    TextOnly,
    VisualOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoNa,
        Variant::NoPrune,
        Variant::RandPrune,
        Variant::TextOnly,
        Variant::VisualOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoNa => "no_na",
            Variant::NoPrune => "no_prune",
            Variant::RandPrune => "rand_prune",
            Variant::TextOnly => "text_only",
            Variant::VisualOnly => "visual_only",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "TMLP",
            Variant::NoNa => "w/o NA Loss",
            Variant::NoPrune => "w/o Pruning",
            Variant::RandPrune => "Rand Pruning",
            Variant::TextOnly => "TMLP_T",
            Variant::VisualOnly => "TMLP_V",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoNa => cfg.alpha = 0.0,
            Variant::NoPrune => cfg.prune = PruneMode::None,
            Variant::RandPrune => cfg.prune = PruneMode::Random,
            Variant::TextOnly => cfg.modalities = Modalities::TextOnly,
            Variant::VisualOnly => cfg.modalities = Modalities::VisualOnly,
        }
        cfg
    }
}

/// Independent random streams derived from the root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Negatives = 2,
    Anchors = 3,
    Dropout = 4,
    Prune = 5,
    Corruption = 6,
    Split = 7,
    Data = 8,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// NA supervision graph for `cfg.prune` from the fused graph.
pub fn supervision_graph(fused: &SparseGraph, cfg: &TrainConfig) -> Result<SparseGraph> {
    match cfg.prune {
        PruneMode::Tps => Ok(tps_prune(fused, cfg.prune_k)?.0),
        PruneMode::Random => random_prune(fused, cfg.prune_k, &mut stream_rng(cfg.seed, Stream::Prune)),
        PruneMode::None => Ok(fused.clone()),
    }
}

/// Everything `fit` trains on. `item_graph` is the NA supervision graph,
/// already pruned as the config requires.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub table: &'a InteractionTable,
    pub visual: Option<&'a FeatureMatrix>,
    pub textual: Option<&'a FeatureMatrix>,
    pub item_graph: &'a SparseGraph,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_bpr: f64,
    pub loss_na: f64,
    /// `None` on epochs skipped by the evaluation stride.
    pub val_r20: Option<f64>,
    pub val_n20: Option<f64>,
    pub best_val_r20: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub seed: u64,
    pub dataset_hash: String,
    pub visual_hash: Option<String>,
    pub textual_hash: Option<String>,
    pub item_graph_hash: String,
    pub off_grid: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_r20: f64,
    pub stopped_early: bool,
    pub checkpoint: Option<PathBuf>,
    pub val_metrics: MetricTable,
    pub test_metrics: MetricTable,
}

impl RunManifest {
    pub fn epochs_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("epoch,loss_bpr,loss_na,val_r20,val_n20\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{},{}", e.epoch, e.loss_bpr, e.loss_na, opt(e.val_r20), opt(e.val_n20));
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| TmlpError::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TmlpError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: TmlpModel,
    pub inputs: ModelInputs,
    pub manifest: RunManifest,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const CHECKPOINT_FILE: &str = "best.tmc";

fn model_config(cfg: &TrainConfig, data: &TrainData<'_>) -> ModelConfig {
    ModelConfig {
        num_users: data.table.num_users(),
        num_items: data.table.num_items(),
        visual_dim: data.visual.map_or(0, FeatureMatrix::dim),
        textual_dim: data.textual.map_or(0, FeatureMatrix::dim),
        hidden: cfg.hidden,
        depth: cfg.depth,
        embed_dim: cfg.embed_dim,
        gcn_layers: cfg.gcn_layers,
        dropout: cfg.dropout,
        modalities: cfg.modalities,
    }
}

/// Model inputs for a table and features; unused modalities are dropped.
pub fn model_inputs(
    table: &InteractionTable,
    visual: Option<&FeatureMatrix>,
    textual: Option<&FeatureMatrix>,
    modalities: Modalities,
) -> Result<ModelInputs> {
    let take = |f: Option<&FeatureMatrix>, used: bool| used.then(|| f.map(|f| f.values.clone())).flatten();
    Ok(ModelInputs {
        visual: take(visual, modalities.uses_visual()),
        textual: take(textual, modalities.uses_textual()),
        adj: Arc::new(BipartiteAdj::from_table(table)?),
    })
}

/// Rebuilds a trained model from its config and checkpoint.
pub fn restore_model(cfg: &ModelConfig, checkpoint: &Path) -> Result<TmlpModel> {
    let mut model = TmlpModel::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    model.store_mut().load_values(&read_checkpoint(checkpoint)?)?;
    Ok(model)
}

fn diverged(epoch: usize, step: usize, triples: &[(u32, u32, u32)], na_items: &[u32], bpr: f64, na: f64) -> TmlpError {
    let show = |n: usize| n.min(16);
    TmlpError::Diverged(format!(
        "non-finite loss at epoch {epoch} step {step} (bpr={bpr}, na={na}); batch of {} triples, first {:?}; NA items {:?}",
        triples.len(),
        &triples[..show(triples.len())],
        &na_items[..show(na_items.len())],
    ))
}

/// Trains until validation Recall@20 stops improving for `patience`
/// evaluations or `max_epochs` is reached, then restores the best
/// parameters and reports validation and test metrics. With `out_dir`, the
/// checkpoint, epoch CSV and manifest are written there.
pub fn fit(cfg: &TrainConfig, data: &TrainData<'_>, out_dir: Option<&Path>) -> Result<FitOutcome> {
    cfg.validate()?;
    let off_grid = cfg.off_grid();
    if !off_grid.is_empty() {
        warn!("event=off_grid_config values={}", off_grid.join(","));
    }
    let table = data.table;
    if !table.has_splits() {
        return Err(TmlpError::InvalidArgument("training needs a split table; run prepare first".into()));
    }
    if data.item_graph.num_nodes() != table.num_items() {
        return Err(TmlpError::NodeCount {
            left: data.item_graph.num_nodes(),
            right: table.num_items(),
        });
    }
    let model_cfg = model_config(cfg, data);
    let mut model = TmlpModel::new(model_cfg.clone(), &mut stream_rng(cfg.seed, Stream::Init))?;
    let inputs = model_inputs(table, data.visual, data.textual, cfg.modalities)?;
    let mut neg_rng = stream_rng(cfg.seed, Stream::Negatives);
    let mut anchor_rng = stream_rng(cfg.seed, Stream::Anchors);
    let mut dropout_rng = stream_rng(cfg.seed, Stream::Dropout);
    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let obj = ObjectiveConfig {
        alpha: cfg.alpha,
        tau: cfg.tau,
        per_modality_na: cfg.per_modality_na,
    };
    let steps = table.train_edges().len().div_ceil(cfg.batch_size);
    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut best_store = model.store().clone();
    let (mut best_r20, mut best_epoch, mut stale) = (f64::NEG_INFINITY, 0usize, 0usize);
    let mut stopped_early = false;
    info!(
        "event=fit_start users={} items={} train_edges={} steps_per_epoch={steps} alpha={} prune={:?} modalities={:?}",
        table.num_users(),
        table.num_items(),
        table.train_edges().len(),
        cfg.alpha,
        cfg.prune,
        cfg.modalities
    );
    for epoch in 0..cfg.max_epochs {
        let (mut sum_bpr, mut sum_na) = (0.0, 0.0);
        for step in 0..steps {
            let triples = sample_bpr_triples(table, cfg.batch_size, &mut neg_rng)?.triples;
            let na_batch = if cfg.alpha != 0.0 {
                let positives: Vec<u32> = triples.iter().map(|t| t.1).collect();
                let b = sample_na_batch(data.item_graph, cfg.na_batch_size(), cfg.anchor_mode, &positives, &mut anchor_rng);
                (b.len() >= 2).then_some(b)
            } else {
                None
            };
            let grads = {
                let mut tape = Tape::new();
                let fwd = model.forward(&mut tape, &inputs, true, &mut dropout_rng)?;
                let loss = model.objective(&mut tape, &fwd, &triples, na_batch.as_ref(), &obj)?;
                let bpr = tape.scalar(loss.bpr);
                let na = loss.na.map_or(0.0, |v| tape.scalar(v));
                if !bpr.is_finite() || !na.is_finite() {
                    let items = na_batch.as_ref().map_or(&[][..], |b| &b.items[..]);
                    return Err(diverged(epoch, step, &triples, items, bpr, na));
                }
                sum_bpr += bpr;
                sum_na += na;
                tape.backward(loss.total)?
            };
            let store = model.store_mut();
            store.accumulate(&grads);
            store.adam_step(&adam);
        }
        let mut record = EpochRecord {
            epoch,
            loss_bpr: sum_bpr / steps as f64,
            loss_na: sum_na / steps as f64,
            val_r20: None,
            val_n20: None,
            best_val_r20: best_r20.max(0.0),
        };
        let last = epoch + 1 == cfg.max_epochs;
        if epoch % cfg.eval_stride == 0 || last {
            let (zu, zi) = model.embeddings(&inputs)?;
            let val = evaluate(&zu, &zi, table, Split::Val, &DEFAULT_CUTOFFS)?;
            let (r20, n20) = (val.recall(20), val.ndcg(20));
            record.val_r20 = Some(r20);
            record.val_n20 = Some(n20);
            if r20 > best_r20 {
                best_r20 = r20;
                best_epoch = epoch;
                best_store = model.store().clone();
                stale = 0;
            } else {
                stale += 1;
            }
            record.best_val_r20 = best_r20;
        }
        info!(
            "event=epoch epoch={epoch} loss_bpr={:.6} loss_na={:.6} val_r20={} best_val_r20={:.6}",
            record.loss_bpr,
            record.loss_na,
            record.val_r20.map_or("-".into(), |v| format!("{v:.6}")),
            record.best_val_r20
        );
        epochs.push(record);
        if stale >= cfg.patience {
            stopped_early = true;
            info!("event=early_stop epoch={epoch} best_epoch={best_epoch}");
            break;
        }
    }
    model.store_mut().copy_values_from(&best_store);
    let (zu, zi) = model.embeddings(&inputs)?;
    let val_metrics = evaluate(&zu, &zi, table, Split::Val, &DEFAULT_CUTOFFS)?;
    let test_metrics = evaluate(&zu, &zi, table, Split::Test, &DEFAULT_CUTOFFS)?;
    let mut manifest = RunManifest {
        config: cfg.clone(),
        model: model_cfg,
        seed: cfg.seed,
        dataset_hash: table.content_hash(),
        visual_hash: data.visual.filter(|_| cfg.modalities.uses_visual()).map(FeatureMatrix::content_hash),
        textual_hash: data.textual.filter(|_| cfg.modalities.uses_textual()).map(FeatureMatrix::content_hash),
        item_graph_hash: data.item_graph.content_hash(),
        off_grid,
        epochs,
        best_epoch,
        best_val_r20: best_r20,
        stopped_early,
        checkpoint: None,
        val_metrics,
        test_metrics,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| TmlpError::io(dir, e))?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        write_checkpoint(&ckpt, model.store().named_values())?;
        manifest.checkpoint = Some(ckpt);
        let csv = dir.join(EPOCHS_FILE);
        std::fs::write(&csv, manifest.epochs_csv()).map_err(|e| TmlpError::io(&csv, e))?;
        manifest.write_json(&dir.join(MANIFEST_FILE))?;
    }
    info!(
        "event=fit_done best_epoch={best_epoch} val_r20={:.6} test_r20={:.6} test_n20={:.6}",
        manifest.val_metrics.recall(20),
        manifest.test_metrics.recall(20),
        manifest.test_metrics.ndcg(20)
    );
    Ok(FitOutcome {
        model,
        inputs,
        manifest,
    })
}

/// One ablation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub recall_10: f64,
    pub recall_20: f64,
    pub ndcg_10: f64,
    pub ndcg_20: f64,
    pub best_epoch: usize,
}

impl AblationRow {
    pub fn from_manifest(variant: Variant, m: &RunManifest) -> Self {
        let t = &m.test_metrics;
        Self {
            variant,
            label: variant.label().to_string(),
            recall_10: t.recall(10),
            recall_20: t.recall(20),
            ndcg_10: t.ndcg(10),
            ndcg_20: t.ndcg(20),
            best_epoch: m.best_epoch,
        }
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,label,R@10,R@20,N@10,N@20,best_epoch\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.variant.name(),
            r.label,
            r.recall_10,
            r.recall_20,
            r.ndcg_10,
            r.ndcg_20,
            r.best_epoch
        );
    }
    out
}

/// Trains each variant on the same data, deriving its supervision graph
/// from the fused graph.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    table: &InteractionTable,
    visual: Option<&FeatureMatrix>,
    textual: Option<&FeatureMatrix>,
    fused: &SparseGraph,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let cfg = variant.apply(base);
        let graph = supervision_graph(fused, &cfg)?;
        let data = TrainData {
            table,
            visual,
            textual,
            item_graph: &graph,
        };
        let dir = out_dir.map(|d| d.join(variant.name()));
        info!("event=ablation_variant variant={}", variant.name());
        let outcome = fit(&cfg, &data, dir.as_deref())?;
        rows.push(AblationRow::from_manifest(variant, &outcome.manifest));
    }
    Ok(rows)
}
