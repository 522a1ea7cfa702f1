//! Layered configuration: built-in defaults, then a TOML file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use tmlp::datasets::SplitRatios;
use tmlp::itemgraph::EdgeWeighting;
use tmlp::synthetic::SyntheticConfig;
use tmlp::trainer::{stream_rng, Stream, TrainConfig};

pub const DEFAULT_SEED: u64 = 2024;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory every command reads its inputs from and writes into.
    pub work: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    /// Item catalogue, one token per line; row order matches feature rows.
    pub items: Option<PathBuf>,
    pub visual: Option<PathBuf>,
    pub textual: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub weighting: EdgeWeighting,
    /// Corruption ratio used by `corrupt`.
    pub epsilon: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Root seed; every random stream derives from it.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub split: SplitRatios,
    pub graph: GraphSection,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
}

impl CliConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies the common flags and propagates the root seed.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if seed.is_some() {
            self.seed = seed;
        }
        if out.is_some() {
            self.paths.work = out;
        }
        let root = self.root_seed();
        self.seed = Some(root);
        self.train.seed = root;
        self.synthetic.seed = root;
        self
    }

    pub fn root_seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn work(&self) -> PathBuf {
        self.paths.work.clone().unwrap_or_else(|| PathBuf::from("tmlp-work"))
    }

    pub fn derived_seed(&self, stream: Stream) -> u64 {
        stream_rng(self.root_seed(), stream).next_u64()
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering_and_unknown_keys() {
        let cfg: CliConfig = toml::from_str("seed = 5\n[train]\nalpha = 0.3\n[graph]\nepsilon = 0.1\n").unwrap();
        assert_eq!(cfg.train.alpha, 0.3);
        assert_eq!(cfg.train.lr, TrainConfig::default().lr);
        let resolved = cfg.resolve(Some(9), None);
        assert_eq!(resolved.train.seed, 9);
        assert_eq!(resolved.seed, Some(9));
        assert!(toml::from_str::<CliConfig>("[train]\nalpah = 1.0\n").is_err());
        assert!(toml::from_str::<CliConfig>("bogus = 1\n").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = CliConfig::default().resolve(None, Some("w".into()));
        let back: CliConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
