//! Graph files.
//!
//! Text: a `TMG1 <nodes> <edges>` header line, then one `src dst weight`
//! line per edge. Binary: magic `TMGB`, `u64` nodes, `u64` edges, then the
//! CSR arrays (`u64` offsets, `u32` columns, `f64` weights), little-endian.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::SparseGraph;
use crate::error::{Result, TmlpError};

pub const GRAPH_TEXT_MAGIC: &str = "TMG1";
pub const GRAPH_BINARY_MAGIC: &[u8; 4] = b"TMGB";

pub fn write_graph(graph: &SparseGraph, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| TmlpError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| TmlpError::io(path, e);
    writeln!(w, "{GRAPH_TEXT_MAGIC} {} {}", graph.num_nodes(), graph.num_edges()).map_err(io)?;
    for (s, d, wt) in graph.edges() {
        writeln!(w, "{s} {d} {wt}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_graph_binary(graph: &SparseGraph, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(GRAPH_BINARY_MAGIC);
    buf.extend_from_slice(&(graph.num_nodes() as u64).to_le_bytes());
    buf.extend_from_slice(&(graph.num_edges() as u64).to_le_bytes());
    for &o in &graph.row_offsets {
        buf.extend_from_slice(&(o as u64).to_le_bytes());
    }
    for &c in &graph.cols {
        buf.extend_from_slice(&c.to_le_bytes());
    }
    for &wt in &graph.weights {
        buf.extend_from_slice(&wt.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| TmlpError::io(path, e))
}

/// Reads either graph format, detected from the leading magic.
pub fn read_graph(path: &Path) -> Result<SparseGraph> {
    let bytes = fs::read(path).map_err(|e| TmlpError::io(path, e))?;
    if bytes.is_empty() {
        return Err(TmlpError::EmptyInput(path.to_path_buf()));
    }
    if bytes.starts_with(GRAPH_BINARY_MAGIC) {
        read_binary(&bytes, path)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| TmlpError::Format {
            path: path.to_path_buf(),
            msg: "not a TMG1 text or TMGB binary graph".into(),
        })?;
        read_text(&text, path)
    }
}

fn read_text(text: &str, path: &Path) -> Result<SparseGraph> {
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, msg: String| TmlpError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let (_, header) = lines.next().ok_or_else(|| TmlpError::EmptyInput(path.to_path_buf()))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    let (nodes, edges) = match head[..] {
        [magic, n, e] if magic == GRAPH_TEXT_MAGIC => (
            n.parse::<usize>().map_err(|_| parse_err(1, format!("bad node count {n:?}")))?,
            e.parse::<usize>().map_err(|_| parse_err(1, format!("bad edge count {e:?}")))?,
        ),
        _ => return Err(parse_err(1, format!("expected `{GRAPH_TEXT_MAGIC} nodes edges` header"))),
    };
    let mut list = Vec::with_capacity(edges);
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let [s, d, w] = f[..] else {
            return Err(parse_err(idx + 1, format!("expected 3 fields, found {}", f.len())));
        };
        let s = s.parse::<u32>().map_err(|_| parse_err(idx + 1, format!("bad source {s:?}")))?;
        let d = d.parse::<u32>().map_err(|_| parse_err(idx + 1, format!("bad target {d:?}")))?;
        let w = w.parse::<f64>().map_err(|_| parse_err(idx + 1, format!("bad weight {w:?}")))?;
        list.push((s, d, w));
    }
    if list.len() != edges {
        return Err(TmlpError::Format {
            path: path.to_path_buf(),
            msg: format!("header declares {edges} edges, found {}", list.len()),
        });
    }
    SparseGraph::from_edges(nodes, &list)
}

fn read_binary(bytes: &[u8], path: &Path) -> Result<SparseGraph> {
    let bad = |msg: &str| TmlpError::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let u64_at = |off: usize| -> Result<u64> {
        bytes
            .get(off..off + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad("truncated"))
    };
    let nodes = u64_at(4)? as usize;
    let edges = u64_at(12)? as usize;
    let expected = 20 + 8 * (nodes + 1) + 4 * edges + 8 * edges;
    if bytes.len() != expected {
        return Err(bad("size does not match header"));
    }
    let mut off = 20;
    let mut offsets = Vec::with_capacity(nodes + 1);
    for _ in 0..=nodes {
        offsets.push(u64_at(off)? as usize);
        off += 8;
    }
    let cols: Vec<u32> = bytes[off..off + 4 * edges]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    off += 4 * edges;
    let weights: Vec<f64> = bytes[off..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if offsets[0] != 0 || offsets[nodes] != edges || offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(bad("row offsets are not monotone"));
    }
    let rows = (0..nodes)
        .map(|m| {
            (offsets[m]..offsets[m + 1])
                .map(|k| (cols[k], weights[k]))
                .collect()
        })
        .collect();
    SparseGraph::from_rows(rows)
}
