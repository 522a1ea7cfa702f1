//! Interaction and feature ingestion, the per-user 8:1:1 split, and BPR
//! triple sampling.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TmlpError};
use crate::numcore::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Bijection between external tokens and contiguous indices.
///
/// Indices follow sorted token order, numerically when every token is an
/// unsigned integer, so `0..n` id spaces map onto themselves.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl IdMap {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        tokens.sort();
        tokens.dedup();
        let numeric: Option<Vec<u64>> = tokens.iter().map(|t| t.parse::<u64>().ok()).collect();
        if let Some(nums) = numeric {
            let mut pairs: Vec<(u64, String)> = nums.into_iter().zip(tokens).collect();
            pairs.sort();
            tokens = pairs.into_iter().map(|(_, t)| t).collect();
        }
        Self::from_ordered(tokens)
    }

    /// Keeps the given order: token `k` gets index `k`.
    pub fn from_ordered(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).map(|&i| i as usize)
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, line number = index.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| TmlpError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TmlpError::io(path, e))?;
        Ok(Self::from_ordered(text.lines().map(str::to_string).collect()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub split: Option<Split>,
}

/// Deduplicated user–item interactions with optional split roles.
#[derive(Clone, Debug)]
pub struct InteractionTable {
    num_users: usize,
    num_items: usize,
    edges: Vec<Interaction>,
    users: IdMap,
    items: IdMap,
    /// Sorted train items per user (all items when the table is unsplit).
    train_by_user: Vec<Vec<u32>>,
    train_edges: Vec<(u32, u32)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    /// Percentage of empty cells in the user × item matrix.
    pub sparsity: f64,
}

impl InteractionTable {
    /// Builds a table from index-space edges. Duplicate (user, item) pairs
    /// keep their first occurrence.
    pub fn new(users: IdMap, items: IdMap, edges: Vec<Interaction>) -> Result<Self> {
        let (num_users, num_items) = (users.len(), items.len());
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        let mut kept = Vec::with_capacity(edges.len());
        let mut with_split = 0usize;
        for e in edges {
            if e.user as usize >= num_users || e.item as usize >= num_items {
                return Err(TmlpError::InvalidArgument(format!(
                    "edge ({}, {}) outside {num_users} users × {num_items} items",
                    e.user, e.item
                )));
            }
            if seen.insert((e.user, e.item)) {
                with_split += e.split.is_some() as usize;
                kept.push(e);
            }
        }
        if with_split != 0 && with_split != kept.len() {
            return Err(TmlpError::InvalidArgument(
                "split column present on some rows but not others".into(),
            ));
        }
        let mut table = Self {
            num_users,
            num_items,
            edges: kept,
            users,
            items,
            train_by_user: Vec::new(),
            train_edges: Vec::new(),
        };
        table.reindex();
        Ok(table)
    }

    fn reindex(&mut self) {
        let mut by_user = vec![Vec::new(); self.num_users];
        for e in &self.edges {
            if matches!(e.split, None | Some(Split::Train)) {
                by_user[e.user as usize].push(e.item);
            }
        }
        for items in &mut by_user {
            items.sort_unstable();
        }
        self.train_edges = by_user
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u as u32, i)))
            .collect();
        self.train_by_user = by_user;
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn edges(&self) -> &[Interaction] {
        &self.edges
    }

    pub fn users(&self) -> &IdMap {
        &self.users
    }

    pub fn items(&self) -> &IdMap {
        &self.items
    }

    pub fn has_splits(&self) -> bool {
        self.edges.first().is_some_and(|e| e.split.is_some())
    }

    /// Sorted train items of `user`.
    pub fn train_items(&self, user: usize) -> &[u32] {
        &self.train_by_user[user]
    }

    pub fn is_train(&self, user: usize, item: u32) -> bool {
        self.train_by_user[user].binary_search(&item).is_ok()
    }

    /// Train edges in (user, item) order.
    pub fn train_edges(&self) -> &[(u32, u32)] {
        &self.train_edges
    }

    /// Items of each user in the given split, sorted.
    pub fn items_by_user(&self, split: Split) -> Vec<Vec<u32>> {
        if split == Split::Train {
            return self.train_by_user.clone();
        }
        let mut out = vec![Vec::new(); self.num_users];
        for e in self.edges.iter().filter(|e| e.split == Some(split)) {
            out[e.user as usize].push(e.item);
        }
        for v in &mut out {
            v.sort_unstable();
        }
        out
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_edges.len(),
            _ => self.edges.iter().filter(|e| e.split == Some(split)).count(),
        }
    }

    pub fn stats(&self) -> DatasetStats {
        let cells = (self.num_users * self.num_items) as f64;
        DatasetStats {
            users: self.num_users,
            items: self.num_items,
            interactions: self.edges.len(),
            sparsity: if cells > 0.0 {
                100.0 * (1.0 - self.edges.len() as f64 / cells)
            } else {
                100.0
            },
        }
    }

    /// SHA-256 over sizes and `(user, item, split)` triples in stored order.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.num_users as u64).to_le_bytes());
        h.update((self.num_items as u64).to_le_bytes());
        for e in &self.edges {
            h.update(e.user.to_le_bytes());
            h.update(e.item.to_le_bytes());
            h.update([e.split.map_or(255, |s| s as u8)]);
        }
        hex::encode(h.finalize())
    }

    /// Writes `user_index item_index role` lines, headed by a comment
    /// carrying the seed that produced the split.
    pub fn write_split(&self, path: &Path, seed: Option<u64>) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| TmlpError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| TmlpError::io(path, e);
        match seed {
            Some(s) => writeln!(w, "# split seed={s}").map_err(io)?,
            None => writeln!(w, "# split seed=none").map_err(io)?,
        }
        for e in &self.edges {
            let role = e.split.unwrap_or(Split::Train);
            writeln!(w, "{} {} {}", e.user, e.item, role).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads a split artifact against known id maps.
    pub fn read_split(path: &Path, users: IdMap, items: IdMap) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TmlpError::io(path, e))?;
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| TmlpError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [u, i, role] = fields[..] else {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            };
            let user = u.parse::<u32>().map_err(|_| err(format!("bad user index {u:?}")))?;
            let item = i.parse::<u32>().map_err(|_| err(format!("bad item index {i:?}")))?;
            let split = Split::parse(role).ok_or_else(|| err(format!("unknown split {role:?}")))?;
            edges.push(Interaction {
                user,
                item,
                split: Some(split),
            });
        }
        if edges.is_empty() {
            return Err(TmlpError::EmptyInput(path.to_path_buf()));
        }
        Self::new(users, items, edges)
    }
}

/// Parses whitespace-separated `user_token item_token [split]` lines.
/// Blank lines and `#` comments are skipped; duplicate pairs are dropped
/// with a warning.
pub fn load_interactions(path: &Path) -> Result<InteractionTable> {
    let text = fs::read_to_string(path).map_err(|e| TmlpError::io(path, e))?;
    parse_interactions(&text, path)
}

/// Like [`load_interactions`], but indexes items by a fixed catalogue so
/// items without interactions keep their rows. Unknown item tokens are an
/// error.
pub fn load_interactions_with_items(path: &Path, items: IdMap) -> Result<InteractionTable> {
    let text = fs::read_to_string(path).map_err(|e| TmlpError::io(path, e))?;
    parse_with(&text, path, Some(items))
}

pub fn parse_interactions(text: &str, origin: &Path) -> Result<InteractionTable> {
    parse_with(text, origin, None)
}

fn parse_with(text: &str, origin: &Path, catalogue: Option<IdMap>) -> Result<InteractionTable> {
    let mut rows: Vec<(&str, &str, Option<Split>, usize)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: String| TmlpError::Parse {
            path: origin.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let split = match fields.len() {
            2 => None,
            3 => Some(
                Split::parse(fields[2]).ok_or_else(|| err(format!("unknown split {:?}", fields[2])))?,
            ),
            n => return Err(err(format!("expected 2 or 3 fields, found {n}"))),
        };
        rows.push((fields[0], fields[1], split, lineno + 1));
    }
    if rows.is_empty() {
        return Err(TmlpError::EmptyInput(origin.to_path_buf()));
    }
    let users = IdMap::from_tokens(rows.iter().map(|r| r.0));
    let items = match catalogue {
        Some(items) => {
            if let Some(r) = rows.iter().find(|r| items.index_of(r.1).is_none()) {
                return Err(TmlpError::Parse {
                    path: origin.to_path_buf(),
                    line: r.3,
                    msg: format!("item {:?} is not in the item catalogue", r.1),
                });
            }
            items
        }
        None => IdMap::from_tokens(rows.iter().map(|r| r.1)),
    };
    let mut seen = std::collections::HashSet::new();
    let mut dups = 0usize;
    let mut edges = Vec::with_capacity(rows.len());
    for (u, i, split, lineno) in rows {
        let user = users.index_of(u).expect("token registered") as u32;
        let item = items.index_of(i).expect("token registered") as u32;
        if !seen.insert((user, item)) {
            if dups == 0 {
                warn!("event=duplicate_interaction line={lineno} user={u} item={i}");
            }
            dups += 1;
            continue;
        }
        edges.push(Interaction { user, item, split });
    }
    if dups > 0 {
        warn!("event=duplicates_dropped count={dups}");
    }
    InteractionTable::new(users, items, edges)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(TmlpError::Config(format!(
                "split ratios {}/{}/{} must be in [0,1] and sum to 1",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

/// Per-user random split. Users with fewer than three interactions keep all
/// of them in train; everyone else gets at least one train edge.
pub fn make_split(table: &InteractionTable, ratios: SplitRatios, seed: u64) -> Result<InteractionTable> {
    ratios.validate()?;
    if table.has_splits() {
        return Err(TmlpError::InvalidArgument("table already carries split roles".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_user: Vec<Vec<u32>> = vec![Vec::new(); table.num_users];
    for e in &table.edges {
        by_user[e.user as usize].push(e.item);
    }
    let mut edges = Vec::with_capacity(table.edges.len());
    for (user, items) in by_user.iter_mut().enumerate() {
        items.sort_unstable();
        items.shuffle(&mut rng);
        let n = items.len();
        let (n_val, n_test) = if n < 3 {
            (0, 0)
        } else {
            let take = |r: f64| if r > 0.0 { ((n as f64 * r).round() as usize).max(1) } else { 0 };
            let (mut v, mut t) = (take(ratios.val), take(ratios.test));
            while v + t >= n {
                if v >= t && v > 0 {
                    v -= 1;
                } else {
                    t -= 1;
                }
            }
            (v, t)
        };
        let n_train = n - n_val - n_test;
        for (k, &item) in items.iter().enumerate() {
            let split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            edges.push(Interaction {
                user: user as u32,
                item,
                split: Some(split),
            });
        }
    }
    InteractionTable::new(table.users.clone(), table.items.clone(), edges)
}

/// (user, positive, negative) index triples.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripleBatch {
    pub triples: Vec<(u32, u32, u32)>,
}

impl TripleBatch {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// Samples train edges uniformly and pairs each with a negative drawn
/// uniformly from the items the user never interacted with in train.
/// Users who interacted with every item are skipped.
pub fn sample_bpr_triples<R: Rng + ?Sized>(
    table: &InteractionTable,
    batch_size: usize,
    rng: &mut R,
) -> Result<TripleBatch> {
    let edges = table.train_edges();
    if edges.is_empty() {
        return Err(TmlpError::InvalidArgument("train split is empty".into()));
    }
    let n_items = table.num_items as u32;
    let saturated = |u: u32| table.train_by_user[u as usize].len() >= n_items as usize;
    if edges.iter().all(|&(u, _)| saturated(u)) {
        return Err(TmlpError::InvalidArgument(
            "every train user interacted with all items; no negatives exist".into(),
        ));
    }
    let mut warned = false;
    let mut triples = Vec::with_capacity(batch_size);
    while triples.len() < batch_size {
        let (u, i) = edges[rng.gen_range(0..edges.len())];
        if saturated(u) {
            if !warned {
                warn!("event=saturated_user user={u}");
                warned = true;
            }
            continue;
        }
        let j = loop {
            let j = rng.gen_range(0..n_items);
            if !table.is_train(u as usize, j) {
                break j;
            }
        };
        triples.push((u, i, j));
    }
    Ok(TripleBatch { triples })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    fn tag(self) -> u32 {
        match self {
            Modality::Visual => 0,
            Modality::Textual => 1,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Modality::Visual),
            1 => Some(Modality::Textual),
            _ => None,
        }
    }
}

/// Dense per-item features for one modality, one row per item index.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub modality: Modality,
    pub values: Tensor2,
}

pub const FEATURE_MAGIC: &[u8; 4] = b"TMF1";

impl FeatureMatrix {
    pub fn new(modality: Modality, values: Tensor2) -> Result<Self> {
        if let Some((idx, _)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let cols = values.ncols().max(1);
            return Err(TmlpError::NonFinite {
                row: idx / cols,
                col: idx % cols,
            });
        }
        Ok(Self { modality, values })
    }

    pub fn num_items(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Binary `TMF1` file: magic, `u32` rows, `u32` cols, `u32` modality tag,
    /// then row-major little-endian `f32` values.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.values.nrows() as u64).to_le_bytes());
        h.update((self.values.ncols() as u64).to_le_bytes());
        for v in self.values.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 4 * self.values.len());
        buf.extend_from_slice(FEATURE_MAGIC);
        buf.extend_from_slice(&(self.num_items() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        buf.extend_from_slice(&self.modality.tag().to_le_bytes());
        for v in self.values.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| TmlpError::io(path, e))
    }
}

/// Loads a feature matrix from a `TMF1` binary file or a headerless CSV.
/// Row `r` belongs to item index `r`.
pub fn load_features(path: &Path, modality: Modality, num_items: usize) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| TmlpError::io(path, e))?;
    if bytes.is_empty() {
        return Err(TmlpError::EmptyInput(path.to_path_buf()));
    }
    let fm = if bytes.starts_with(FEATURE_MAGIC) {
        parse_binary_features(&bytes, path, modality)?
    } else {
        let text = String::from_utf8(bytes).map_err(|_| TmlpError::Format {
            path: path.to_path_buf(),
            msg: "neither TMF1 binary nor UTF-8 CSV".into(),
        })?;
        parse_csv_features(&text, path, modality)?
    };
    if fm.num_items() != num_items {
        return Err(TmlpError::RowCount {
            features: fm.num_items(),
            items: num_items,
        });
    }
    Ok(fm)
}

fn parse_binary_features(bytes: &[u8], path: &Path, modality: Modality) -> Result<FeatureMatrix> {
    let bad = |msg: String| TmlpError::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 16 {
        return Err(bad("truncated TMF1 header".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap()) as usize;
    let (rows, cols, tag) = (word(1), word(2), word(3) as u32);
    let stored = Modality::from_tag(tag).ok_or_else(|| bad(format!("unknown modality tag {tag}")))?;
    if stored != modality {
        return Err(bad(format!("file holds {stored:?} features, expected {modality:?}")));
    }
    let payload = &bytes[16..];
    if payload.len() != rows * cols * 4 {
        return Err(bad(format!(
            "payload has {} bytes, header declares {rows}×{cols} f32",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let values = Tensor2::from_shape_vec((rows, cols), values).map_err(|e| bad(e.to_string()))?;
    FeatureMatrix::new(modality, values)
}

fn parse_csv_features(text: &str, path: &Path, modality: Modality) -> Result<FeatureMatrix> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| TmlpError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let start = values.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| err(format!("bad number {:?}", field.trim())))?;
            if !v.is_finite() {
                return Err(TmlpError::NonFinite {
                    row: rows,
                    col: values.len() - start,
                });
            }
            values.push(v);
        }
        let width = values.len() - start;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => return Err(err(format!("row has {width} columns, expected {c}"))),
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| TmlpError::EmptyInput(path.to_path_buf()))?;
    let values = Tensor2::from_shape_vec((rows, cols), values).expect("rectangular rows");
    FeatureMatrix::new(modality, values)
}
