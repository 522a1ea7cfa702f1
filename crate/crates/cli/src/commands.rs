use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use serde::Serialize;
use tmlp::datasets::{
    load_features, load_interactions, load_interactions_with_items, make_split, FeatureMatrix, IdMap, InteractionTable,
    Modality, Split,
};
use tmlp::evalmetrics::{evaluate, DEFAULT_CUTOFFS};
use tmlp::itemgraph::{build_knn_graph, corrupt_graph, fuse_graphs, read_graph, tps_prune, write_graph, SparseGraph};
use tmlp::synthetic::generate;
use tmlp::trainer::{
    ablation_csv, fit, model_inputs, restore_model, run_ablation, supervision_graph, PruneMode, RunManifest,
    Stream, TrainData, Variant, MANIFEST_FILE,
};

use crate::config::CliConfig;
use crate::Command;

pub const USERS: &str = "users.txt";
pub const ITEMS: &str = "items.txt";
pub const SPLIT: &str = "split.tsv";
pub const STATS_CSV: &str = "stats.csv";
pub const STATS_JSON: &str = "stats.json";
pub const VISUAL: &str = "visual.tmf";
pub const TEXTUAL: &str = "textual.tmf";
pub const GRAPH_VISUAL: &str = "graph_visual.tmg";
pub const GRAPH_TEXTUAL: &str = "graph_textual.tmg";
pub const GRAPH_FUSED: &str = "graph_fused.tmg";
pub const GRAPH_PRUNED: &str = "graph_pruned.tmg";
pub const GRAPH_CORRUPT: &str = "graph_corrupt.tmg";
pub const RAW_INTERACTIONS: &str = "interactions.tsv";
pub const RAW_VISUAL: &str = "visual_raw.tmf";
pub const RAW_TEXTUAL: &str = "textual_raw.tmf";
pub const RAW_ITEMS: &str = "item_ids.txt";

pub fn run(command: Command, cfg: CliConfig) -> Result<()> {
    let work = cfg.work();
    fs::create_dir_all(&work).with_context(|| format!("creating {}", work.display()))?;
    match command {
        Command::Prepare {
            interactions,
            visual,
            textual,
        } => prepare(&cfg, &work, interactions, visual, textual),
        Command::BuildGraph { knn_k, beta } => build_graph(&cfg, &work, knn_k, beta),
        Command::Prune { k, graph } => prune(&cfg, &work, k, graph),
        Command::Corrupt { epsilon, graph } => corrupt(&cfg, &work, epsilon, graph),
        Command::Train { variant, graph, name } => train(&cfg, &work, &variant, graph, name),
        Command::Evaluate { run, split } => evaluate_run(&cfg, &work, run, &split),
        Command::Ablate { variants } => ablate(&cfg, &work, &variants),
        Command::Synth => synth(&cfg, &work),
    }
}

/// Fails with a pointer to the command that produces `path`.
fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        bail!("missing {}; run `tmlp {producer}` first", path.display())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn prepare(
    cfg: &CliConfig,
    work: &Path,
    interactions: Option<PathBuf>,
    visual: Option<PathBuf>,
    textual: Option<PathBuf>,
) -> Result<()> {
    let pick = |flag: Option<PathBuf>, conf: &Option<PathBuf>, raw: &str| {
        flag.or_else(|| conf.clone()).unwrap_or_else(|| work.join(raw))
    };
    let inter_path = pick(interactions, &cfg.paths.interactions, RAW_INTERACTIONS);
    let visual_path = pick(visual, &cfg.paths.visual, RAW_VISUAL);
    let textual_path = pick(textual, &cfg.paths.textual, RAW_TEXTUAL);
    require(&inter_path, "synth` or pass `--interactions")?;
    let catalogue = cfg.paths.items.clone().or_else(|| Some(work.join(RAW_ITEMS)).filter(|p| p.exists()));
    let raw = match catalogue {
        Some(path) => load_interactions_with_items(&inter_path, IdMap::read(&path)?)?,
        None => load_interactions(&inter_path)?,
    };
    let table = if raw.has_splits() {
        raw
    } else {
        cfg.split.validate()?;
        make_split(&raw, cfg.split, cfg.derived_seed(Stream::Split))?
    };
    let n = table.num_items();
    for (path, modality, out) in [
        (&visual_path, Modality::Visual, VISUAL),
        (&textual_path, Modality::Textual, TEXTUAL),
    ] {
        require(path, "synth` or pass the feature flag to `prepare")?;
        load_features(path, modality, n)?.write_binary(&work.join(out))?;
    }
    table.users().write(&work.join(USERS))?;
    table.items().write(&work.join(ITEMS))?;
    table.write_split(&work.join(SPLIT), Some(cfg.root_seed()))?;
    let stats = table.stats();
    write_text(
        &work.join(STATS_CSV),
        &format!(
            "users,items,interactions,sparsity\n{},{},{},{:.2}%\n",
            stats.users, stats.items, stats.interactions, stats.sparsity
        ),
    )?;
    write_json(&work.join(STATS_JSON), &stats)?;
    info!(
        "event=prepared users={} items={} interactions={} sparsity={:.2} train={} val={} test={}",
        stats.users,
        stats.items,
        stats.interactions,
        stats.sparsity,
        table.count(Split::Train),
        table.count(Split::Val),
        table.count(Split::Test)
    );
    Ok(())
}

struct Prepared {
    table: InteractionTable,
    visual: FeatureMatrix,
    textual: FeatureMatrix,
}

fn load_prepared(work: &Path) -> Result<Prepared> {
    for f in [USERS, ITEMS, SPLIT, VISUAL, TEXTUAL] {
        require(&work.join(f), "prepare")?;
    }
    let users = IdMap::read(&work.join(USERS))?;
    let items = IdMap::read(&work.join(ITEMS))?;
    let table = InteractionTable::read_split(&work.join(SPLIT), users, items)?;
    let n = table.num_items();
    Ok(Prepared {
        visual: load_features(&work.join(VISUAL), Modality::Visual, n)?,
        textual: load_features(&work.join(TEXTUAL), Modality::Textual, n)?,
        table,
    })
}

fn build_graph(cfg: &CliConfig, work: &Path, knn_k: Option<usize>, beta: Option<f64>) -> Result<()> {
    for f in [VISUAL, TEXTUAL] {
        require(&work.join(f), "prepare")?;
    }
    let visual = read_features_any(&work.join(VISUAL), Modality::Visual)?;
    let textual = read_features_any(&work.join(TEXTUAL), Modality::Textual)?;
    let k = knn_k.unwrap_or(cfg.train.knn_k);
    let beta = beta.unwrap_or(cfg.train.beta);
    let gv = build_knn_graph(&visual, k, cfg.graph.weighting)?;
    let gt = build_knn_graph(&textual, k, cfg.graph.weighting)?;
    let fused = fuse_graphs(&gv, &gt, beta)?;
    write_graph(&gv, &work.join(GRAPH_VISUAL))?;
    write_graph(&gt, &work.join(GRAPH_TEXTUAL))?;
    write_graph(&fused, &work.join(GRAPH_FUSED))?;
    info!(
        "event=graph_built items={} knn_k={k} beta={beta} fused_edges={} hash={}",
        fused.num_nodes(),
        fused.num_edges(),
        fused.content_hash()
    );
    Ok(())
}

fn read_features_any(path: &Path, modality: Modality) -> Result<FeatureMatrix> {
    let items = path.parent().map(|d| d.join(ITEMS)).ok_or_else(|| anyhow!("bad path {}", path.display()))?;
    require(&items, "prepare")?;
    let n = IdMap::read(&items)?.len();
    Ok(load_features(path, modality, n)?)
}

fn prune(cfg: &CliConfig, work: &Path, k: Option<usize>, graph: Option<PathBuf>) -> Result<()> {
    let input = graph.unwrap_or_else(|| work.join(GRAPH_FUSED));
    require(&input, "build-graph")?;
    let k = k.unwrap_or(cfg.train.prune_k);
    let g = read_graph(&input)?;
    let (pruned, report) = tps_prune(&g, k)?;
    write_graph(&pruned, &work.join(GRAPH_PRUNED))?;
    write_text(&work.join("prune_report.csv"), &report.to_csv())?;
    write_json(
        &work.join("prune_report.json"),
        &serde_json::json!({
            "k": k,
            "input": input,
            "kept_edges": report.kept_edges(),
            "dropped_edges": report.dropped_edges(),
            "ts_min": report.ts_min,
            "ts_mean": report.ts_mean,
            "ts_max": report.ts_max,
            "hash": pruned.content_hash(),
        }),
    )?;
    info!(
        "event=pruned k={k} kept={} dropped={} ts_mean={}",
        report.kept_edges(),
        report.dropped_edges(),
        report.ts_mean.map_or("-".into(), |v| format!("{v:.6}"))
    );
    Ok(())
}

fn corrupt(cfg: &CliConfig, work: &Path, epsilon: Option<f64>, graph: Option<PathBuf>) -> Result<()> {
    let input = graph.unwrap_or_else(|| work.join(GRAPH_FUSED));
    require(&input, "build-graph")?;
    let eps = epsilon.unwrap_or(cfg.graph.epsilon);
    let g = read_graph(&input)?;
    let seed = cfg.derived_seed(Stream::Corruption);
    let (noisy, replaced) = corrupt_graph(&g, eps, seed)?;
    write_graph(&noisy, &work.join(GRAPH_CORRUPT))?;
    let fraction = if g.num_edges() > 0 {
        replaced as f64 / g.num_edges() as f64
    } else {
        0.0
    };
    write_json(
        &work.join("corrupt.json"),
        &serde_json::json!({
            "epsilon": eps,
            "seed": seed,
            "input": input,
            "edges": g.num_edges(),
            "replaced": replaced,
            "replaced_fraction": fraction,
        }),
    )?;
    info!("event=corrupted epsilon={eps} edges={} replaced={replaced}", g.num_edges());
    Ok(())
}

fn parse_variant(name: &str) -> Result<Variant> {
    Variant::parse(name).ok_or_else(|| {
        let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        anyhow!("unknown variant {name:?}; expected one of {}", known.join(", "))
    })
}

fn train(cfg: &CliConfig, work: &Path, variant: &str, graph: Option<PathBuf>, name: Option<String>) -> Result<()> {
    let variant = parse_variant(variant)?;
    let data = load_prepared(work)?;
    let tcfg = variant.apply(&cfg.train);
    let item_graph = match (graph, tcfg.prune) {
        (Some(path), PruneMode::Random) => supervision_graph(&read_graph(&path)?, &tcfg)?,
        (Some(path), _) => read_graph(&path)?,
        (None, PruneMode::Tps) => {
            require(&work.join(GRAPH_PRUNED), "prune")?;
            read_graph(&work.join(GRAPH_PRUNED))?
        }
        (None, _) => {
            require(&work.join(GRAPH_FUSED), "build-graph")?;
            supervision_graph(&read_graph(&work.join(GRAPH_FUSED))?, &tcfg)?
        }
    };
    let dir = work.join("runs").join(name.unwrap_or_else(|| variant.name().to_string()));
    let outcome = fit(
        &tcfg,
        &TrainData {
            table: &data.table,
            visual: Some(&data.visual),
            textual: Some(&data.textual),
            item_graph: &item_graph,
        },
        Some(&dir),
    )?;
    let mut resolved = cfg.clone();
    resolved.train = tcfg;
    write_text(&dir.join("config.toml"), &resolved.to_toml()?)?;
    outcome.manifest.test_metrics.write_csv(&dir.join("metrics_test.csv"))?;
    outcome.manifest.test_metrics.write_json(&dir.join("metrics_test.json"))?;
    print!("{}", outcome.manifest.test_metrics.to_csv());
    Ok(())
}

fn evaluate_run(cfg: &CliConfig, work: &Path, run: Option<PathBuf>, split: &str) -> Result<()> {
    let split = match Split::parse(split) {
        Some(s @ (Split::Val | Split::Test)) => s,
        _ => bail!("split must be val or test, got {split:?}"),
    };
    let dir = run.unwrap_or_else(|| work.join("runs").join("full"));
    require(&dir.join(MANIFEST_FILE), "train")?;
    let manifest = RunManifest::read_json(&dir.join(MANIFEST_FILE))?;
    let ckpt = manifest
        .checkpoint
        .clone()
        .ok_or_else(|| anyhow!("run {} has no checkpoint", dir.display()))?;
    require(&ckpt, "train")?;
    let data = load_prepared(work)?;
    if data.table.content_hash() != manifest.dataset_hash {
        bail!("prepared data in {} differs from the data the run was trained on", work.display());
    }
    let model = restore_model(&manifest.model, &ckpt)?;
    let inputs = model_inputs(&data.table, Some(&data.visual), Some(&data.textual), manifest.model.modalities)?;
    let (zu, zi) = model.embeddings(&inputs)?;
    let table = evaluate(&zu, &zi, &data.table, split, &DEFAULT_CUTOFFS)?;
    table.write_csv(&dir.join(format!("metrics_{}.csv", split.as_str())))?;
    table.write_json(&dir.join(format!("metrics_{}.json", split.as_str())))?;
    info!(
        "event=evaluated run={} split={} users={} r20={:.6} n20={:.6} seed={}",
        dir.display(),
        split.as_str(),
        table.users,
        table.recall(20),
        table.ndcg(20),
        cfg.root_seed()
    );
    print!("{}", table.to_csv());
    Ok(())
}

fn ablate(cfg: &CliConfig, work: &Path, names: &[String]) -> Result<()> {
    let variants = names.iter().map(|n| parse_variant(n)).collect::<Result<Vec<_>>>()?;
    if variants.is_empty() {
        bail!("no variants given");
    }
    let data = load_prepared(work)?;
    require(&work.join(GRAPH_FUSED), "build-graph")?;
    let fused: SparseGraph = read_graph(&work.join(GRAPH_FUSED))?;
    let dir = work.join("ablation");
    let rows = run_ablation(
        &cfg.train,
        &variants,
        &data.table,
        Some(&data.visual),
        Some(&data.textual),
        &fused,
        Some(&dir),
    )?;
    let csv = ablation_csv(&rows);
    write_text(&dir.join("ablation.csv"), &csv)?;
    write_json(&dir.join("ablation.json"), &rows)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml()?)?;
    print!("{csv}");
    Ok(())
}

fn synth(cfg: &CliConfig, work: &Path) -> Result<()> {
    let data = generate(&cfg.synthetic)?;
    let mut lines = String::from("# user item\n");
    for e in data.table.edges() {
        lines.push_str(&format!("{} {}\n", e.user, e.item));
    }
    write_text(&work.join(RAW_INTERACTIONS), &lines)?;
    data.table.items().write(&work.join(RAW_ITEMS))?;
    data.visual.write_binary(&work.join(RAW_VISUAL))?;
    data.textual.write_binary(&work.join(RAW_TEXTUAL))?;
    let clusters: String = data
        .item_cluster
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{i} {c}\n"))
        .collect();
    write_text(&work.join("clusters.tsv"), &clusters)?;
    info!(
        "event=synthesized users={} items={} interactions={} seed={}",
        data.table.num_users(),
        data.table.num_items(),
        data.table.edges().len(),
        cfg.synthetic.seed
    );
    Ok(())
}
