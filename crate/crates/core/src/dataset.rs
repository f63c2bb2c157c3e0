//! TU-format graph datasets.
//!
//! Reads the plain-text layout of the TU graph classification benchmark
//! (`<name>_A.txt`, `<name>_graph_indicator.txt`, `<name>_graph_labels.txt`
//! plus optional node labels and attributes), assigns the anomaly class and
//! produces train/test splits in which training holds normal graphs only.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{substream, Stream};

/// Where a graph's `features` matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSource {
    Attributes,
    NodeLabelOneHot,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub id: usize,
    pub node_count: usize,
    /// Undirected edges stored once as `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    /// `node_count × d_f`; zero columns when the dataset has neither
    /// attributes nor node labels.
    pub features: Matrix,
    /// Raw TU node labels, when the dataset provides them.
    pub node_labels: Option<Vec<i64>>,
    pub label: i64,
}

impl Graph {
    /// Builds a graph from arbitrary edge pairs: self-loops are dropped and
    /// `(i, j)` / `(j, i)` collapse into one undirected edge.
    pub fn new(id: usize, node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>, features: Matrix, label: i64) -> Result<Self> {
        if features.rows() != node_count {
            return Err(Error::Shape(format!("graph {id}: {} feature rows for {node_count} nodes", features.rows())));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= node_count || b >= node_count {
                return Err(Error::InvalidDataset(format!("graph {id}: edge ({a}, {b}) out of range for {node_count} nodes")));
            }
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
        Ok(Self { id, node_count, edges: set.into_iter().collect(), features, node_labels: None, label })
    }

    /// Structure-only graph with no features; handy in tests.
    pub fn from_edges(node_count: usize, edges: &[(usize, usize)]) -> Self {
        Self::new(0, node_count, edges.iter().copied(), Matrix::zeros(node_count, 0), 0).expect("valid edge list")
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    pub fn adjacency(&self) -> Matrix {
        let mut a = Matrix::zeros(self.node_count, self.node_count);
        for &(i, j) in &self.edges {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
        a
    }

    /// Applies a node relabelling: node `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        assert_eq!(perm.len(), self.node_count);
        let mut features = Matrix::zeros(self.node_count, self.feature_dim());
        for v in 0..self.node_count {
            features.row_mut(perm[v]).copy_from_slice(self.features.row(v));
        }
        let mut g = Graph::new(self.id, self.node_count, self.edges.iter().map(|&(i, j)| (perm[i], perm[j])), features, self.label)
            .expect("permutation keeps edges valid");
        g.node_labels = self.node_labels.as_ref().map(|labels| {
            let mut out = vec![0; labels.len()];
            for v in 0..labels.len() {
                out[perm[v]] = labels[v];
            }
            out
        });
        g
    }
}

#[derive(Debug, Clone)]
pub struct GraphDataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub feature_source: FeatureSource,
    /// Sorted distinct node labels; the one-hot column order when
    /// `feature_source == NodeLabelOneHot`.
    pub node_label_vocab: Vec<i64>,
    /// Set by [`assign_anomaly_labels`].
    pub anomaly_class: Option<i64>,
}

impl GraphDataset {
    /// A dataset built in memory. Feature source is `Attributes` when the
    /// graphs carry features, `None` otherwise.
    pub fn from_graphs(name: impl Into<String>, graphs: Vec<Graph>) -> Self {
        let feature_source = if graphs.iter().any(|g| g.feature_dim() > 0) { FeatureSource::Attributes } else { FeatureSource::None };
        Self { name: name.into(), graphs, feature_source, node_label_vocab: Vec::new(), anomaly_class: None }
    }

    pub fn is_anomaly(&self, g: &Graph) -> bool {
        self.anomaly_class == Some(g.label)
    }

    pub fn anomaly_count(&self) -> usize {
        self.graphs.iter().filter(|g| self.is_anomaly(g)).count()
    }

    pub fn anomaly_ratio(&self) -> f64 {
        self.anomaly_count() as f64 / self.graphs.len().max(1) as f64
    }

    pub fn class_counts(&self) -> BTreeMap<i64, usize> {
        let mut counts = BTreeMap::new();
        for g in &self.graphs {
            *counts.entry(g.label).or_insert(0) += 1;
        }
        counts
    }

    pub fn average_nodes(&self) -> f64 {
        self.graphs.iter().map(|g| g.node_count as f64).sum::<f64>() / self.graphs.len().max(1) as f64
    }

    pub fn average_edges(&self) -> f64 {
        self.graphs.iter().map(|g| g.edges.len() as f64).sum::<f64>() / self.graphs.len().max(1) as f64
    }

    pub fn feature_dim(&self) -> usize {
        self.graphs.first().map_or(0, Graph::feature_dim)
    }
}

fn file_path(root: &Path, name: &str, suffix: &str) -> PathBuf {
    root.join(format!("{name}_{suffix}.txt"))
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.into() }
}

fn parse_ints(path: &Path) -> Result<Vec<i64>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, l)| l.parse::<i64>().map_err(|e| parse_err(path, n, format!("expected integer, got {l:?}: {e}"))))
        .collect()
}

fn split_fields(l: &str) -> impl Iterator<Item = &str> {
    l.split(',').map(str::trim)
}

/// Reads `<root>/<name>_*.txt` into a dataset. Node indices become 0-based
/// and local to their graph.
pub fn parse_tu_dataset(root: &Path, name: &str) -> Result<GraphDataset> {
    let indicator_path = file_path(root, name, "graph_indicator");
    let indicator = parse_ints(&indicator_path)?;
    let graph_labels = parse_ints(&file_path(root, name, "graph_labels"))?;
    let edge_path = file_path(root, name, "A");
    let edge_lines = read_lines(&edge_path)?;

    let graph_count = graph_labels.len();
    let node_total = indicator.len();
    // graph_of[node] (0-based) and per-graph first node.
    let mut graph_of = Vec::with_capacity(node_total);
    let mut first_node = vec![usize::MAX; graph_count];
    let mut node_counts = vec![0usize; graph_count];
    let mut last = 0i64;
    for (v, &gi) in indicator.iter().enumerate() {
        if gi < 1 || gi as usize > graph_count {
            return Err(parse_err(&indicator_path, v + 1, format!("graph id {gi} outside 1..={graph_count}")));
        }
        if gi < last {
            return Err(parse_err(&indicator_path, v + 1, "graph indicator is not sorted"));
        }
        last = gi;
        let g = (gi - 1) as usize;
        if first_node[g] == usize::MAX {
            first_node[g] = v;
        }
        node_counts[g] += 1;
        graph_of.push(g);
    }
    if let Some(g) = first_node.iter().position(|&f| f == usize::MAX) {
        return Err(Error::InvalidDataset(format!("graph {} has no nodes", g + 1)));
    }

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); graph_count];
    for (n, l) in &edge_lines {
        let ids: Vec<&str> = split_fields(l).collect();
        if ids.len() != 2 {
            return Err(parse_err(&edge_path, *n, format!("expected two comma-separated node ids, got {l:?}")));
        }
        let parse = |s: &str| -> Result<usize> {
            let v = s.parse::<usize>().map_err(|e| parse_err(&edge_path, *n, format!("bad node id {s:?}: {e}")))?;
            if v == 0 || v > node_total {
                return Err(parse_err(&edge_path, *n, format!("node id {v} outside 1..={node_total}")));
            }
            Ok(v - 1)
        };
        let (a, b) = (parse(ids[0])?, parse(ids[1])?);
        let g = graph_of[a];
        if graph_of[b] != g {
            return Err(parse_err(&edge_path, *n, "edge crosses graph boundary"));
        }
        edges[g].push((a - first_node[g], b - first_node[g]));
    }

    let node_labels_path = file_path(root, name, "node_labels");
    let node_labels = if node_labels_path.exists() {
        let labels = parse_ints(&node_labels_path)?;
        if labels.len() != node_total {
            return Err(Error::InvalidDataset(format!("{} node labels for {node_total} nodes", labels.len())));
        }
        Some(labels)
    } else {
        None
    };

    let attr_path = file_path(root, name, "node_attributes");
    let attributes = if attr_path.exists() {
        let lines = read_lines(&attr_path)?;
        if lines.len() != node_total {
            return Err(Error::InvalidDataset(format!("{} attribute rows for {node_total} nodes", lines.len())));
        }
        let mut width = None;
        let mut data = Vec::new();
        for (n, l) in &lines {
            let row = split_fields(l)
                .map(|s| s.parse::<f64>().map_err(|e| parse_err(&attr_path, *n, format!("bad attribute {s:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if let Some(x) = row.iter().find(|x| !x.is_finite()) {
                return Err(parse_err(&attr_path, *n, format!("non-finite attribute {x}")));
            }
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(parse_err(&attr_path, *n, format!("ragged attribute row: {} values, expected {w}", row.len())))
                }
                _ => {}
            }
            data.extend(row);
        }
        Some(Matrix::from_vec(node_total, width.unwrap_or(0), data))
    } else {
        None
    };

    let node_label_vocab: Vec<i64> = node_labels
        .as_ref()
        .map(|l| l.iter().copied().collect::<BTreeSet<_>>().into_iter().collect())
        .unwrap_or_default();
    let feature_source = match (&attributes, &node_labels) {
        (Some(_), _) => FeatureSource::Attributes,
        (None, Some(_)) => FeatureSource::NodeLabelOneHot,
        (None, None) => FeatureSource::None,
    };

    let mut graphs = Vec::with_capacity(graph_count);
    for g in 0..graph_count {
        let (start, count) = (first_node[g], node_counts[g]);
        let features = match (&attributes, &node_labels) {
            (Some(attr), _) => attr.slice_rows(start, start + count),
            (None, Some(labels)) => one_hot_labels(&labels[start..start + count], &node_label_vocab),
            (None, None) => Matrix::zeros(count, 0),
        };
        let mut graph = Graph::new(g, count, edges[g].iter().copied(), features, graph_labels[g])?;
        graph.node_labels = node_labels.as_ref().map(|l| l[start..start + count].to_vec());
        graphs.push(graph);
    }

    Ok(GraphDataset { name: name.to_string(), graphs, feature_source, node_label_vocab, anomaly_class: None })
}

fn one_hot_labels(labels: &[i64], vocab: &[i64]) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), vocab.len());
    for (v, l) in labels.iter().enumerate() {
        let col = vocab.binary_search(l).expect("label drawn from vocab");
        m[(v, col)] = 1.0;
    }
    m
}

/// Writes a dataset in TU layout. Edges are emitted in both directions, as
/// the benchmark files do.
pub fn write_tu_dataset(ds: &GraphDataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    let name = &ds.name;
    let mut a = Vec::new();
    let mut indicator = Vec::new();
    let mut labels = Vec::new();
    let mut node_labels = Vec::new();
    let mut attributes = Vec::new();
    let mut offset = 0usize;
    for (gi, g) in ds.graphs.iter().enumerate() {
        for &(i, j) in &g.edges {
            writeln!(a, "{}, {}", offset + i + 1, offset + j + 1)?;
            writeln!(a, "{}, {}", offset + j + 1, offset + i + 1)?;
        }
        for v in 0..g.node_count {
            writeln!(indicator, "{}", gi + 1)?;
            if let Some(l) = &g.node_labels {
                writeln!(node_labels, "{}", l[v])?;
            }
            if ds.feature_source == FeatureSource::Attributes {
                let row: Vec<String> = g.features.row(v).iter().map(|x| format!("{x:?}")).collect();
                writeln!(attributes, "{}", row.join(", "))?;
            }
        }
        writeln!(labels, "{}", g.label)?;
        offset += g.node_count;
    }
    fs::write(file_path(root, name, "A"), a)?;
    fs::write(file_path(root, name, "graph_indicator"), indicator)?;
    fs::write(file_path(root, name, "graph_labels"), labels)?;
    if ds.graphs.iter().any(|g| g.node_labels.is_some()) {
        fs::write(file_path(root, name, "node_labels"), node_labels)?;
    }
    if ds.feature_source == FeatureSource::Attributes {
        fs::write(file_path(root, name, "node_attributes"), attributes)?;
    }
    Ok(())
}

/// Marks the minority graph class as anomalous, or `override_class` when
/// given (datasets whose anomalous class is known a priori).
pub fn assign_anomaly_labels(mut ds: GraphDataset, override_class: Option<i64>) -> Result<GraphDataset> {
    let counts = ds.class_counts();
    let anomaly = match override_class {
        Some(c) => {
            if !counts.contains_key(&c) {
                return Err(Error::InvalidDataset(format!("anomaly class {c} does not occur in {}", ds.name)));
            }
            c
        }
        None => {
            let min = counts.values().copied().min().ok_or_else(|| Error::InvalidDataset("empty dataset".into()))?;
            let minority: Vec<i64> = counts.iter().filter(|(_, &n)| n == min).map(|(&c, _)| c).collect();
            if minority.len() > 1 {
                return Err(Error::AmbiguousMinority(minority));
            }
            minority[0]
        }
    };
    if counts.len() < 2 {
        return Err(Error::InvalidDataset(format!("{} has a single graph class", ds.name)));
    }
    ds.anomaly_class = Some(anomaly);
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub seed: u64,
}

/// Shuffles the normal graphs under `seed` and keeps `⌊train_frac · normals⌋`
/// of them for training; every other graph goes to the test side.
pub fn make_split(ds: &GraphDataset, seed: u64, train_frac: f64) -> Result<SplitSpec> {
    if ds.anomaly_class.is_none() {
        return Err(Error::InvalidSplit("anomaly labels not assigned".into()));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidSplit(format!("train fraction {train_frac} outside (0, 1)")));
    }
    let mut normals: Vec<usize> = ds.graphs.iter().filter(|g| !ds.is_anomaly(g)).map(|g| g.id).collect();
    if normals.len() < 2 {
        return Err(Error::InvalidSplit(format!("need at least 2 normal graphs, found {}", normals.len())));
    }
    let n_train = (train_frac * normals.len() as f64).floor() as usize;
    if n_train == 0 || n_train == normals.len() {
        return Err(Error::InvalidSplit(format!("train fraction {train_frac} leaves an empty side for {} normals", normals.len())));
    }
    normals.shuffle(&mut substream(seed, Stream::Split));
    let mut train_ids = normals[..n_train].to_vec();
    train_ids.sort_unstable();
    let train: BTreeSet<usize> = train_ids.iter().copied().collect();
    let test_ids = ds.graphs.iter().map(|g| g.id).filter(|id| !train.contains(id)).collect();
    Ok(SplitSpec { train_ids, test_ids, seed })
}

/// Several graphs flattened into one node sequence. Nodes of graph `k`
/// occupy rows `offsets[k]..offsets[k + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    pub offsets: Vec<usize>,
    /// Undirected edges with batch-global node indices, `(i, j)` with `i < j`.
    pub edge_index: Vec<(usize, usize)>,
    pub graph_membership: Vec<usize>,
    pub graph_count: usize,
}

impl GraphBatch {
    pub fn new(graphs: &[&Graph]) -> Self {
        let mut offsets = vec![0];
        let mut edge_index = Vec::new();
        let mut graph_membership = Vec::new();
        for (k, g) in graphs.iter().enumerate() {
            let base = *offsets.last().unwrap();
            edge_index.extend(g.edges.iter().map(|&(i, j)| (base + i, base + j)));
            graph_membership.extend(std::iter::repeat_n(k, g.node_count));
            offsets.push(base + g.node_count);
        }
        Self { offsets, edge_index, graph_membership, graph_count: graphs.len() }
    }

    pub fn node_count(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn graph_nodes(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    /// Per-graph edge lists with offsets removed.
    pub fn graph_edges(&self, k: usize) -> Vec<(usize, usize)> {
        let range = self.graph_nodes(k);
        self.edge_index
            .iter()
            .filter(|(i, _)| range.contains(i))
            .map(|&(i, j)| (i - range.start, j - range.start))
            .collect()
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count()];
        for &(i, j) in &self.edge_index {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    /// Stacks per-graph matrices in batch order.
    pub fn stack(parts: &[&Matrix]) -> Matrix {
        Matrix::vcat(parts)
    }
}
