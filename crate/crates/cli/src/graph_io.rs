//! Plain-text graph formats.
//!
//! Edge list: a header line `n q`, then one `u v` pair per line, vertices
//! 0-indexed, each undirected edge written once. Labels (planted or
//! estimated partitions alike): one integer in `0..q` per line, line `v`
//! labeling vertex `v`.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use blockbp_core::{Partition, SbmInstance};

/// Serializes the graph as an edge list (each edge once, smaller endpoint
/// first, lexicographic order).
pub fn edge_list_string(g: &SbmInstance) -> String {
    let mut out = String::new();
    out.push_str(&format!("{} {}\n", g.n(), g.q()));
    for u in 0..g.n() {
        for &w in g.neighbors(u) {
            if (w as usize) > u {
                out.push_str(&format!("{u} {w}\n"));
            }
        }
    }
    out
}

/// One label per line.
pub fn labels_string(labels: &[u8]) -> String {
    let mut out = String::new();
    for &l in labels {
        out.push_str(&format!("{l}\n"));
    }
    out
}

pub fn write_edge_list(g: &SbmInstance, path: &Path) -> Result<()> {
    fs::write(path, edge_list_string(g))
        .with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_labels(labels: &[u8], path: &Path) -> Result<()> {
    fs::write(path, labels_string(labels))
        .with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_partition(p: &Partition, path: &Path) -> Result<()> {
    write_labels(p.labels(), path)
}

/// Reads an edge list plus a labels file back into a validated instance.
/// The stored seed is zero: a loaded graph carries no sampling provenance.
pub fn read_graph(edges: &Path, labels: &Path) -> Result<SbmInstance> {
    let text = fs::read_to_string(edges)
        .with_context(|| format!("cannot read {}", edges.display()))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| anyhow::anyhow!("empty edge file"))?;
    let mut parts = header.split_whitespace();
    let n: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| anyhow::anyhow!("bad header {header:?}: expected \"n q\""))?;
    let q: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| anyhow::anyhow!("bad header {header:?}: expected \"n q\""))?;
    if parts.next().is_some() {
        bail!("bad header {header:?}: expected \"n q\"");
    }
    let mut adjacency: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut ends = line.split_whitespace();
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|x| x.parse().ok())
                .ok_or_else(|| anyhow::anyhow!("line {}: expected \"u v\"", ln + 1))
        };
        let u = parse(ends.next())?;
        let v = parse(ends.next())?;
        if ends.next().is_some() {
            bail!("line {}: expected \"u v\"", ln + 1);
        }
        if u >= n || v >= n {
            bail!("line {}: vertex out of range (n = {n})", ln + 1);
        }
        if u == v {
            bail!("line {}: self-loop", ln + 1);
        }
        adjacency[u].push(v as u32);
        adjacency[v].push(u as u32);
    }
    for (v, list) in adjacency.iter_mut().enumerate() {
        list.sort_unstable();
        if list.windows(2).any(|w| w[0] == w[1]) {
            bail!("duplicate edge at vertex {v}");
        }
    }
    let truth = read_labels(labels, q)?;
    if truth.len() != n {
        bail!(
            "labels file has {} lines, graph has {} vertices",
            truth.len(),
            n
        );
    }
    Ok(SbmInstance::from_parts(adjacency, truth, q, 0))
}

/// Reads a labels file, checking every label lies in `0..q`.
pub fn read_labels(path: &Path, q: usize) -> Result<Vec<u8>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: usize = line
            .trim()
            .parse()
            .with_context(|| format!("line {}: not a label", ln + 1))?;
        if l >= q {
            bail!("line {}: label {l} out of range (q = {q})", ln + 1);
        }
        out.push(l as u8);
    }
    Ok(out)
}
