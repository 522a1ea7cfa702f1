mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::CliConfig;

#[derive(Parser, Debug)]
#[command(name = "tmlp", version, about = "Topology-aware MLP recommender pipeline")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Work directory for inputs and artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load interactions and features, split, and write dataset statistics.
    Prepare {
        #[arg(long)]
        interactions: Option<PathBuf>,
        #[arg(long)]
        visual: Option<PathBuf>,
        #[arg(long)]
        textual: Option<PathBuf>,
    },
    /// Build per-modality kNN graphs and fuse them.
    BuildGraph {
        #[arg(long)]
        knn_k: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Keep the top-K neighbors of every item by topological similarity.
    Prune {
        #[arg(long)]
        k: Option<usize>,
        /// Graph to prune (defaults to the fused graph).
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Replace item-graph edges with random noise.
    Corrupt {
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Train one model and write its run directory.
    Train {
        #[arg(long, default_value = "full")]
        variant: String,
        /// Supervision graph to use instead of the default artifact.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Run directory name under `runs/`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Evaluate a trained run on a split.
    Evaluate {
        /// Run directory (defaults to `runs/full`).
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train a list of variants and write a comparison table.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "full,no_na,no_prune,rand_prune")]
        variants: Vec<String>,
    },
    /// Write a planted-cluster dataset as raw inputs for `prepare`.
    Synth,
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| writeln!(buf, "level={} {}", record.level().as_str().to_lowercase(), record.args()))
        .target(env_logger::Target::Stderr)
        .init();
}

fn main() -> Result<()> {
    init_logging();
    let cli = Cli::parse();
    let base = match &cli.config {
        Some(path) => CliConfig::from_file(path)?,
        None => CliConfig::default(),
    };
    let cfg = base.resolve(cli.seed, cli.out.clone());
    let result = commands::run(cli.command, cfg);
    if let Err(e) = &result {
        log::error!("event=failed error={e:#}");
    }
    result
}
