//! Typed, undirected, partially labeled graphs.
//!
//! Edges are stored once as ordered pairs `(u, v)` with `u < v`; the input
//! files may list an arc in either direction (or both), self-loops are
//! dropped and duplicates collapse. Node types partition `0..n` into `K`
//! non-empty groups.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GesfError, Result};

/// How labels are interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Multiclass,
    Multilabel,
}

impl std::str::FromStr for LabelMode {
    type Err = GesfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiclass" => Ok(LabelMode::Multiclass),
            "multilabel" => Ok(LabelMode::Multilabel),
            other => Err(GesfError::Argument(format!(
                "unknown mode `{other}` (expected multiclass or multilabel)"
            ))),
        }
    }
}

impl std::fmt::Display for LabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelMode::Multiclass => "multiclass",
            LabelMode::Multilabel => "multilabel",
        })
    }
}

/// A node label: one class index, or a set of label indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    Set(BTreeSet<usize>),
}

impl Label {
    fn indices(&self) -> Vec<usize> {
        match self {
            Label::Class(c) => vec![*c],
            Label::Set(s) => s.iter().copied().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    n: usize,
    node_type: Vec<usize>,
    partition: Vec<Vec<usize>>,
    local_index: Vec<usize>,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    labels: BTreeMap<usize, Label>,
    mode: LabelMode,
}

impl Graph {
    /// Builds a graph, normalizing the edge list and validating every invariant.
    pub fn new(
        n: usize,
        node_type: Vec<usize>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        labels: BTreeMap<usize, Label>,
        mode: LabelMode,
    ) -> Result<Self> {
        if n == 0 {
            return Err(GesfError::Validation("graph has no nodes".into()));
        }
        if node_type.len() != n {
            return Err(GesfError::Validation(format!(
                "{} type assignments for {n} nodes",
                node_type.len()
            )));
        }
        let k = node_type.iter().max().map_or(1, |&t| t + 1);
        let mut partition = vec![Vec::new(); k];
        let mut local_index = vec![0; n];
        for (v, &t) in node_type.iter().enumerate() {
            local_index[v] = partition[t].len();
            partition[t].push(v);
        }
        if let Some(t) = partition.iter().position(Vec::is_empty) {
            return Err(GesfError::Validation(format!("node type {t} has no nodes")));
        }

        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(GesfError::Validation(format!(
                    "edge ({u}, {v}) references a node outside 0..{n}"
                )));
            }
            if u != v {
                set.insert((u.min(v), u.max(v)));
            }
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut neighbors = vec![Vec::new(); n];
        for &(u, v) in &edges {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }

        for (&v, label) in &labels {
            if v >= n {
                return Err(GesfError::Validation(format!(
                    "label references unknown node {v}"
                )));
            }
            match (mode, label) {
                (LabelMode::Multiclass, Label::Class(_)) => {}
                (LabelMode::Multilabel, Label::Set(s)) if !s.is_empty() => {}
                (LabelMode::Multilabel, Label::Set(_)) => {
                    return Err(GesfError::Validation(format!("node {v} has an empty label set")))
                }
                _ => {
                    return Err(GesfError::Validation(format!(
                        "label of node {v} does not match mode {mode}"
                    )))
                }
            }
        }

        Ok(Graph {
            n,
            node_type,
            partition,
            local_index,
            edges,
            neighbors,
            labels,
            mode,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn num_types(&self) -> usize {
        self.partition.len()
    }

    pub fn node_type(&self, v: usize) -> usize {
        self.node_type[v]
    }

    pub fn node_types(&self) -> &[usize] {
        &self.node_type
    }

    /// Nodes of type `k` in ascending id order.
    pub fn type_nodes(&self, k: usize) -> &[usize] {
        &self.partition[k]
    }

    /// Position of `v` inside `type_nodes(node_type(v))`.
    pub fn local_index(&self, v: usize) -> usize {
        self.local_index[v]
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// 1-step neighbors of `v`, ascending.
    pub fn adjacent(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn labels(&self) -> &BTreeMap<usize, Label> {
        &self.labels
    }

    pub fn label(&self, v: usize) -> Option<&Label> {
        self.labels.get(&v)
    }

    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    /// Number of classes (multiclass) or labels (multilabel): largest index + 1.
    pub fn num_classes(&self) -> usize {
        self.labels
            .values()
            .flat_map(Label::indices)
            .max()
            .map_or(0, |c| c + 1)
    }

    /// The single node type carrying labels.
    pub fn labeled_type(&self) -> Result<usize> {
        let mut types = self.labels.keys().map(|&v| self.node_type[v]);
        let first = types
            .next()
            .ok_or_else(|| GesfError::Validation("graph has no labeled nodes".into()))?;
        if types.any(|t| t != first) {
            return Err(GesfError::Validation(
                "labels span more than one node type".into(),
            ));
        }
        Ok(first)
    }

    /// Dense 0/1 adjacency matrix.
    pub fn adjacency(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.n, self.n));
        for &(u, v) in &self.edges {
            a[[u, v]] = 1.0;
            a[[v, u]] = 1.0;
        }
        a
    }

    /// Nodes of type `k` reachable from `v` by at least one walk of exactly
    /// `steps` edges, i.e. the support of column `v` of `A^steps` restricted to `V_k`.
    pub fn neighbors(&self, v: usize, steps: usize, k: usize) -> Result<Vec<usize>> {
        if v >= self.n {
            return Err(GesfError::Argument(format!("node {v} out of range 0..{}", self.n)));
        }
        if k >= self.num_types() {
            return Err(GesfError::Argument(format!(
                "type {k} out of range 0..{}",
                self.num_types()
            )));
        }
        if steps == 0 {
            return Err(GesfError::Argument("step count must be at least 1".into()));
        }
        let mut frontier = vec![false; self.n];
        frontier[v] = true;
        for _ in 0..steps {
            let mut next = vec![false; self.n];
            for (u, _) in frontier.iter().enumerate().filter(|(_, &on)| on) {
                for &w in &self.neighbors[u] {
                    next[w] = true;
                }
            }
            frontier = next;
        }
        Ok(frontier
            .iter()
            .enumerate()
            .filter(|&(u, &on)| on && self.node_type[u] == k)
            .map(|(u, _)| u)
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = GraphDoc {
            n: self.n,
            types: self.node_type.clone(),
            edges: self.edges.iter().map(|&(u, v)| [u, v]).collect(),
            labels: self
                .labels
                .iter()
                .map(|(&v, l)| (v, l.indices()))
                .collect(),
            mode: self.mode,
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GraphDoc = serde_json::from_str(text)?;
        let labels = doc
            .labels
            .into_iter()
            .map(|(v, ls)| {
                let label = match doc.mode {
                    LabelMode::Multiclass => match ls.as_slice() {
                        [c] => Label::Class(*c),
                        _ => {
                            return Err(GesfError::Validation(format!(
                                "node {v}: multiclass label must hold one class"
                            )))
                        }
                    },
                    LabelMode::Multilabel => Label::Set(ls.into_iter().collect()),
                };
                Ok((v, label))
            })
            .collect::<Result<_>>()?;
        Graph::new(
            doc.n,
            doc.types,
            doc.edges.into_iter().map(|[u, v]| (u, v)),
            labels,
            doc.mode,
        )
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    n: usize,
    types: Vec<usize>,
    edges: Vec<[usize; 2]>,
    labels: Vec<(usize, Vec<usize>)>,
    mode: LabelMode,
}

fn read_pairs(path: &Path) -> Result<Vec<(usize, usize, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| GesfError::io(path, e))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse_err = |msg: String| GesfError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if fields.len() != 2 {
            return Err(parse_err(format!(
                "expected two integers, found {} fields",
                fields.len()
            )));
        }
        let a = fields[0]
            .parse::<usize>()
            .map_err(|_| parse_err(format!("`{}` is not a non-negative integer", fields[0])))?;
        let b = fields[1]
            .parse::<usize>()
            .map_err(|_| parse_err(format!("`{}` is not a non-negative integer", fields[1])))?;
        out.push((i + 1, a, b));
    }
    Ok(out)
}

/// Reads a graph from an edge file, an optional type file and a label file.
///
/// The node count is one more than the largest id in the edge and type files.
pub fn load_graph(
    edge_path: &Path,
    type_path: Option<&Path>,
    label_path: &Path,
    mode: LabelMode,
) -> Result<Graph> {
    let edges = read_pairs(edge_path)?;
    let types = type_path.map(read_pairs).transpose()?;
    let label_lines = read_pairs(label_path)?;

    let mut n = edges
        .iter()
        .map(|&(_, u, v)| u.max(v) + 1)
        .max()
        .unwrap_or(0);
    if let Some(types) = &types {
        n = n.max(types.iter().map(|&(_, v, _)| v + 1).max().unwrap_or(0));
    }

    let node_type = match &types {
        None => vec![0; n],
        Some(types) => {
            let mut assigned: Vec<Option<usize>> = vec![None; n];
            for &(line, v, t) in types {
                match assigned[v] {
                    Some(prev) if prev != t => {
                        return Err(GesfError::Validation(format!(
                            "{}:{line}: node {v} assigned types {prev} and {t}",
                            type_path.unwrap().display()
                        )))
                    }
                    _ => assigned[v] = Some(t),
                }
            }
            assigned
                .into_iter()
                .enumerate()
                .map(|(v, t)| {
                    t.ok_or_else(|| GesfError::Validation(format!("node {v} has no type")))
                })
                .collect::<Result<_>>()?
        }
    };

    let mut labels: BTreeMap<usize, Label> = BTreeMap::new();
    for (line, v, c) in label_lines {
        if v >= n {
            return Err(GesfError::Validation(format!(
                "{}:{line}: label references unknown node {v}",
                label_path.display()
            )));
        }
        match mode {
            LabelMode::Multiclass => match labels.get(&v) {
                Some(Label::Class(prev)) if *prev != c => {
                    return Err(GesfError::Validation(format!(
                        "{}:{line}: node {v} has classes {prev} and {c}",
                        label_path.display()
                    )))
                }
                _ => {
                    labels.insert(v, Label::Class(c));
                }
            },
            LabelMode::Multilabel => {
                if let Label::Set(s) = labels
                    .entry(v)
                    .or_insert_with(|| Label::Set(BTreeSet::new()))
                {
                    s.insert(c);
                }
            }
        }
    }

    Graph::new(
        n,
        node_type,
        edges.into_iter().map(|(_, u, v)| (u, v)),
        labels,
        mode,
    )
}

/// Writes `g` in the format read by [`load_graph`]; the type file lists every node.
pub fn write_graph(g: &Graph, edge_path: &Path, type_path: &Path, label_path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut edges = String::new();
    for &(u, v) in g.edges() {
        let _ = writeln!(edges, "{u}\t{v}");
    }
    let mut types = String::new();
    for v in 0..g.node_count() {
        let _ = writeln!(types, "{v}\t{}", g.node_type(v));
    }
    let mut labels = String::new();
    for (v, label) in g.labels() {
        match label {
            Label::Class(c) => {
                let _ = writeln!(labels, "{v}\t{c}");
            }
            Label::Set(set) => {
                for c in set {
                    let _ = writeln!(labels, "{v}\t{c}");
                }
            }
        }
    }
    for (path, text) in [(edge_path, edges), (type_path, types), (label_path, labels)] {
        fs::write(path, text).map_err(|e| GesfError::io(path, e))?;
    }
    Ok(())
}

/// A train/test partition of the labeled nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train_nodes: Vec<usize>,
    pub test_nodes: Vec<usize>,
    pub fraction: f64,
    pub seed: u64,
}

/// Uniform (unstratified) random split with `floor(fraction * labeled)` training nodes.
pub fn make_split(g: &Graph, fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(GesfError::Config(format!(
            "train fraction {fraction} outside (0, 1)"
        )));
    }
    let mut labeled: Vec<usize> = g.labels.keys().copied().collect();
    let total = labeled.len();
    // the small epsilon absorbs products such as 0.29 * 100 = 28.999999999999996
    let n_train = (fraction * total as f64 + 1e-9).floor() as usize;
    if n_train == 0 || n_train >= total {
        return Err(GesfError::Config(format!(
            "fraction {fraction} of {total} labeled nodes leaves an empty train or test set"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labeled.shuffle(&mut rng);
    let mut train_nodes = labeled[..n_train].to_vec();
    let mut test_nodes = labeled[n_train..].to_vec();
    train_nodes.sort_unstable();
    test_nodes.sort_unstable();
    Ok(Split {
        train_nodes,
        test_nodes,
        fraction,
        seed,
    })
}
