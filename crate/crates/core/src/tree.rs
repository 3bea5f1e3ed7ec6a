//! Hierarchical semantic document identifiers.
//!
//! Documents are clustered recursively with k-means until every cluster holds
//! at most `C` documents. Each document is then identified by the labels on
//! its root-to-leaf path. Internal nodes carry the mean of their descendant
//! document vectors; those centroids double as the per-step token embeddings
//! for beam decoding and as the subspace centroids for tree-index search.
//!
//! Node ids follow depth-first construction order, which is also the
//! tie-break order used by every search over the tree.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_file, EmbeddingMatrix};
use crate::error::{Error, Result};

pub const MAX_LLOYD_ITERATIONS: usize = 100;
pub const CENTROID_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// Cluster index in `0..centroids.len()` for each input point.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Point indices per cluster, each list ascending.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.k()];
        for (i, &a) in self.assignments.iter().enumerate() {
            groups[a].push(i);
        }
        groups
    }
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

fn count_distinct(points: &[&[f32]]) -> usize {
    // +0.0 folds -0.0 into 0.0 so equal points hash equally
    let set: HashSet<Vec<u32>> = points
        .iter()
        .map(|p| p.iter().map(|&v| (v + 0.0).to_bits()).collect())
        .collect();
    set.len()
}

fn mean_of(points: &[&[f32]], members: impl Iterator<Item = usize>, dim: usize) -> Vec<f64> {
    let mut sum = vec![0.0f64; dim];
    let mut n = 0usize;
    for i in members {
        for (s, &v) in sum.iter_mut().zip(points[i]) {
            *s += v as f64;
        }
        n += 1;
    }
    if n > 0 {
        sum.iter_mut().for_each(|s| *s /= n as f64);
    }
    sum
}

fn nearest(p: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_seeds(points: &[&[f32]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let to_f64 = |p: &[f32]| p.iter().map(|&v| v as f64).collect::<Vec<_>>();
    let mut centroids = vec![to_f64(points[rng.random_range(0..points.len())])];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            acc += w;
            if w > 0.0 && acc > target {
                pick = Some(i);
                break;
            }
        }
        // rounding can leave target just above the final sum
        let pick = pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap());
        let c = to_f64(points[pick]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn assign(points: &[&[f32]], centroids: &[Vec<f64>]) -> Vec<usize> {
    points.iter().map(|p| nearest(p, centroids).0).collect()
}

/// Moves the point farthest from its own centroid into each empty cluster.
/// Only points from clusters with more than one member are eligible, so a
/// repair never empties another cluster.
fn repair_empty(points: &[&[f32]], centroids: &mut [Vec<f64>], assignments: &mut [usize]) {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for j in 0..k {
        if sizes[j] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            let own = assignments[i];
            if sizes[own] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[own]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let Some((i, _)) = best else { break };
        sizes[assignments[i]] -= 1;
        assignments[i] = j;
        sizes[j] = 1;
        centroids[j] = points[i].iter().map(|&v| v as f64).collect();
    }
}

/// Lloyd's k-means with k-means++ seeding and `k = min(C, distinct points)`.
pub fn kmeans_cluster(points: &[&[f32]], c: usize, seed: u64) -> Result<KMeans> {
    if c < 2 {
        return Err(Error::arg(format!("branching factor must be >= 2, got {c}")));
    }
    if points.is_empty() {
        return Err(Error::arg("k-means needs at least one point"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::arg("points have differing dimensions"));
    }
    let k = c.min(count_distinct(points));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let k = centroids.len();

    let mut assignments = assign(points, &centroids);
    repair_empty(points, &mut centroids, &mut assignments);
    for _ in 0..MAX_LLOYD_ITERATIONS {
        for (j, c) in centroids.iter_mut().enumerate() {
            *c = mean_of(points, (0..points.len()).filter(|&i| assignments[i] == j), dim);
        }
        let mut next = assign(points, &centroids);
        repair_empty(points, &mut centroids, &mut next);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    let centroids = (0..k)
        .map(|j| mean_of(points, (0..points.len()).filter(|&i| assignments[i] == j), dim))
        .collect();
    Ok(KMeans {
        assignments,
        centroids,
    })
}

/// Root-to-leaf label sequence; labels start at 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DocIdPath(pub Vec<u32>);

impl fmt::Display for DocIdPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        f.write_str(&parts.join("-"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Internal { centroid: Vec<f64>, children: Vec<usize> },
    Leaf { doc_index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub parent: Option<usize>,
    pub label: Option<u32>,
    pub kind: NodeKind,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf { .. })
    }

    pub fn children(&self) -> &[usize] {
        match &self.kind {
            NodeKind::Internal { children, .. } => children,
            NodeKind::Leaf { .. } => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTree {
    branching: usize,
    dim: usize,
    nodes: Vec<Node>,
    leaf_of_doc: Vec<Option<usize>>,
}

pub const ROOT: usize = 0;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

struct Builder<'a> {
    matrix: &'a EmbeddingMatrix,
    branching: usize,
    seed: u64,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn push(&mut self, node: Node) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn centroid(&self, members: &[usize]) -> Vec<f64> {
        let rows: Vec<&[f32]> = members.iter().map(|&i| self.matrix.row(i)).collect();
        mean_of(&rows, 0..rows.len(), self.matrix.dim())
    }

    /// Builds the subtree for `members` (ascending doc indices) and returns
    /// its node id.
    fn build(&mut self, members: Vec<usize>, parent: Option<usize>, label: Option<u32>) -> Result<usize> {
        let id = self.push(Node {
            parent,
            label,
            kind: NodeKind::Internal {
                centroid: self.centroid(&members),
                children: Vec::new(),
            },
        });
        let mut children = Vec::new();
        if members.len() <= self.branching {
            for (j, &doc_index) in members.iter().enumerate() {
                children.push(self.push(Node {
                    parent: Some(id),
                    label: Some(j as u32 + 1),
                    kind: NodeKind::Leaf { doc_index },
                }));
            }
        } else {
            for (j, group) in self.split(&members, id)?.into_iter().enumerate() {
                children.push(self.build(group, Some(id), Some(j as u32 + 1))?);
            }
        }
        if let NodeKind::Internal { children: slot, .. } = &mut self.nodes[id].kind {
            *slot = children;
        }
        Ok(id)
    }

    fn split(&self, members: &[usize], node_id: usize) -> Result<Vec<Vec<usize>>> {
        let rows: Vec<&[f32]> = members.iter().map(|&i| self.matrix.row(i)).collect();
        let seed = splitmix64(self.seed ^ splitmix64(node_id as u64));
        let km = kmeans_cluster(&rows, self.branching, seed)?;
        let groups: Vec<Vec<usize>> = km
            .groups()
            .into_iter()
            .filter(|g| !g.is_empty())
            .map(|g| g.into_iter().map(|i| members[i]).collect())
            .collect();
        if groups.len() > 1 {
            return Ok(groups);
        }
        Ok(median_split(&rows, members))
    }
}

/// Halves a cluster along its highest-variance coordinate (ties: lowest
/// coordinate; ordering within the coordinate: value, then doc index).
fn median_split(rows: &[&[f32]], members: &[usize]) -> Vec<Vec<usize>> {
    let dim = rows[0].len();
    let mean = mean_of(rows, 0..rows.len(), dim);
    let mut best_coord = 0;
    let mut best_var = -1.0;
    for (c, &m) in mean.iter().enumerate() {
        let var: f64 = rows.iter().map(|r| (r[c] as f64 - m).powi(2)).sum();
        if var > best_var {
            best_var = var;
            best_coord = c;
        }
    }
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| {
        rows[a][best_coord]
            .total_cmp(&rows[b][best_coord])
            .then(members[a].cmp(&members[b]))
    });
    let half = members.len() / 2;
    let mut left: Vec<usize> = order[..half].iter().map(|&i| members[i]).collect();
    let mut right: Vec<usize> = order[half..].iter().map(|&i| members[i]).collect();
    left.sort_unstable();
    right.sort_unstable();
    vec![left, right]
}

pub fn build_tree(matrix: &EmbeddingMatrix, c: usize, seed: u64) -> Result<SemanticTree> {
    if c < 2 {
        return Err(Error::arg(format!("branching factor must be >= 2, got {c}")));
    }
    if matrix.is_empty() {
        return Err(Error::arg("cannot build a tree over an empty matrix"));
    }
    let mut builder = Builder {
        matrix,
        branching: c,
        seed,
        nodes: Vec::new(),
    };
    builder.build((0..matrix.len()).collect(), None, None)?;
    Ok(SemanticTree::assemble(c, matrix.dim(), builder.nodes))
}

impl SemanticTree {
    fn assemble(branching: usize, dim: usize, nodes: Vec<Node>) -> Self {
        let max_doc = nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::Leaf { doc_index } => Some(doc_index + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let mut leaf_of_doc = vec![None; max_doc];
        for (id, n) in nodes.iter().enumerate() {
            if let NodeKind::Leaf { doc_index } = n.kind {
                leaf_of_doc[doc_index].get_or_insert(id);
            }
        }
        SemanticTree {
            branching,
            dim,
            nodes,
            leaf_of_doc,
        }
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn children(&self, id: usize) -> &[usize] {
        self.nodes[id].children()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    /// Node count per level below the root.
    pub fn level_widths(&self) -> Vec<usize> {
        let mut widths = Vec::new();
        let mut frontier = vec![ROOT];
        loop {
            let next: Vec<usize> = frontier
                .iter()
                .flat_map(|&n| self.children(n).iter().copied())
                .collect();
            if next.is_empty() {
                return widths;
            }
            widths.push(next.len());
            frontier = next;
        }
    }

    /// Longest root-to-leaf path length (number of labels).
    pub fn depth(&self) -> usize {
        self.level_widths().len()
    }

    pub fn max_level_width(&self) -> usize {
        self.level_widths().into_iter().max().unwrap_or(0)
    }

    pub fn leaf_of(&self, doc_index: usize) -> Option<usize> {
        self.leaf_of_doc.get(doc_index).copied().flatten()
    }

    pub fn path_of_node(&self, mut id: usize) -> DocIdPath {
        let mut labels = Vec::new();
        while let Some(label) = self.nodes[id].label {
            labels.push(label);
            match self.nodes[id].parent {
                Some(p) => id = p,
                None => break,
            }
        }
        labels.reverse();
        DocIdPath(labels)
    }

    pub fn path(&self, doc_index: usize) -> Option<DocIdPath> {
        self.leaf_of(doc_index).map(|leaf| self.path_of_node(leaf))
    }

    /// Follows labels from the root; returns the doc index at the leaf.
    pub fn resolve(&self, path: &DocIdPath) -> Option<usize> {
        let mut node = ROOT;
        for &label in &path.0 {
            let children = self.children(node);
            node = *children.get((label as usize).checked_sub(1)?)?;
        }
        match self.nodes[node].kind {
            NodeKind::Leaf { doc_index } => Some(doc_index),
            NodeKind::Internal { .. } => None,
        }
    }

    pub fn to_records(&self) -> TreeRecords {
        let nodes = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, n)| match &n.kind {
                NodeKind::Internal { centroid, .. } => NodeRecord {
                    id,
                    parent: n.parent,
                    label: n.label,
                    kind: RecordKind::Internal,
                    centroid: Some(centroid.clone()),
                    doc_index: None,
                },
                NodeKind::Leaf { doc_index } => NodeRecord {
                    id,
                    parent: n.parent,
                    label: n.label,
                    kind: RecordKind::Leaf,
                    centroid: None,
                    doc_index: Some(*doc_index),
                },
            })
            .collect();
        TreeRecords {
            c: self.branching,
            dim: self.dim,
            nodes,
        }
    }

    /// Rebuilds a tree from flat records. Only structural well-formedness
    /// (ids in order, parents preceding children, fields matching kinds) is
    /// enforced; semantic checks are left to [`validate_tree`].
    pub fn from_records(records: TreeRecords) -> Result<Self> {
        let n = records.nodes.len();
        if n == 0 {
            return Err(Error::format("tree has no nodes"));
        }
        let mut nodes: Vec<Node> = Vec::with_capacity(n);
        for (pos, r) in records.nodes.into_iter().enumerate() {
            if r.id != pos {
                return Err(Error::format(format!("node at position {pos} has id {}", r.id)));
            }
            match r.parent {
                None if pos != ROOT => {
                    return Err(Error::format(format!("node {pos} has no parent")));
                }
                Some(p) if p >= pos => {
                    return Err(Error::format(format!(
                        "node {pos} has parent {p}, which does not precede it"
                    )));
                }
                _ => {}
            }
            let kind = match (r.kind, r.centroid, r.doc_index) {
                (RecordKind::Internal, Some(centroid), None) => NodeKind::Internal {
                    centroid,
                    children: Vec::new(),
                },
                (RecordKind::Leaf, None, Some(doc_index)) => NodeKind::Leaf { doc_index },
                _ => {
                    return Err(Error::format(format!(
                        "node {pos}: fields do not match its kind"
                    )))
                }
            };
            if let Some(p) = r.parent {
                match &mut nodes[p].kind {
                    NodeKind::Internal { children, .. } => children.push(pos),
                    NodeKind::Leaf { .. } => {
                        return Err(Error::format(format!("node {pos} has a leaf parent")))
                    }
                }
            }
            nodes.push(Node {
                parent: r.parent,
                label: r.label,
                kind,
            });
        }
        Ok(SemanticTree::assemble(records.c, records.dim, nodes))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_records()).expect("tree records serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let records: TreeRecords =
            serde_json::from_str(text).map_err(|e| Error::format(format!("bad tree JSON: {e}")))?;
        Self::from_records(records)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Internal,
    Leaf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    pub parent: Option<usize>,
    pub label: Option<u32>,
    pub kind: RecordKind,
    pub centroid: Option<Vec<f64>>,
    pub doc_index: Option<usize>,
}

/// Serialized tree: nodes in depth-first construction order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeRecords {
    pub c: usize,
    pub dim: usize,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    BranchingTooSmall(usize),
    DimMismatch { tree: usize, matrix: usize },
    RootNotInternal,
    RootHasLabel,
    ChildCount { node: usize, count: usize },
    Label { node: usize, expected: u32, found: Option<u32> },
    DocOutOfRange { node: usize, doc_index: usize },
    DuplicateDoc { doc_index: usize, doc_id: String },
    MissingDoc { doc_index: usize, doc_id: String },
    CentroidDim { node: usize, len: usize },
    CentroidMismatch { node: usize, coord: usize, stored: f64, mean: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BranchingTooSmall(c) => write!(f, "branching factor {c} < 2"),
            Violation::DimMismatch { tree, matrix } => {
                write!(f, "tree dim {tree} != matrix dim {matrix}")
            }
            Violation::RootNotInternal => write!(f, "root is not an internal node"),
            Violation::RootHasLabel => write!(f, "root carries a label"),
            Violation::ChildCount { node, count } => {
                write!(f, "node {node} has {count} children")
            }
            Violation::Label { node, expected, found } => {
                write!(f, "node {node} label {found:?}, expected {expected}")
            }
            Violation::DocOutOfRange { node, doc_index } => {
                write!(f, "leaf {node} points at doc {doc_index}, out of range")
            }
            Violation::DuplicateDoc { doc_index, doc_id } => {
                write!(f, "doc {doc_index} ({doc_id}) appears in more than one leaf")
            }
            Violation::MissingDoc { doc_index, doc_id } => {
                write!(f, "doc {doc_index} ({doc_id}) is not in any leaf")
            }
            Violation::CentroidDim { node, len } => {
                write!(f, "node {node} centroid has length {len}")
            }
            Violation::CentroidMismatch { node, coord, stored, mean } => write!(
                f,
                "node {node} centroid[{coord}] = {stored}, descendant mean is {mean}"
            ),
        }
    }
}

/// Checks the structural invariants and that each internal centroid is the
/// mean of the document vectors below it.
pub fn validate_tree(tree: &SemanticTree, matrix: &EmbeddingMatrix) -> Vec<Violation> {
    let mut out = Vec::new();
    if tree.branching < 2 {
        out.push(Violation::BranchingTooSmall(tree.branching));
    }
    if tree.dim != matrix.dim() {
        out.push(Violation::DimMismatch {
            tree: tree.dim,
            matrix: matrix.dim(),
        });
    }
    let root = &tree.nodes[ROOT];
    if root.is_leaf() {
        out.push(Violation::RootNotInternal);
    }
    if root.label.is_some() {
        out.push(Violation::RootHasLabel);
    }

    let n_docs = matrix.len();
    let mut seen = vec![0usize; n_docs];
    // Descendant doc lists, filled bottom-up: children always have larger ids.
    let mut below: Vec<Vec<usize>> = vec![Vec::new(); tree.nodes.len()];
    for id in (0..tree.nodes.len()).rev() {
        let node = &tree.nodes[id];
        match &node.kind {
            NodeKind::Leaf { doc_index } => {
                if *doc_index >= n_docs {
                    out.push(Violation::DocOutOfRange {
                        node: id,
                        doc_index: *doc_index,
                    });
                } else {
                    seen[*doc_index] += 1;
                    below[id].push(*doc_index);
                }
            }
            NodeKind::Internal { centroid, children } => {
                if children.is_empty() || children.len() > tree.branching {
                    out.push(Violation::ChildCount {
                        node: id,
                        count: children.len(),
                    });
                }
                for (j, &child) in children.iter().enumerate() {
                    let expected = j as u32 + 1;
                    if tree.nodes[child].label != Some(expected) {
                        out.push(Violation::Label {
                            node: child,
                            expected,
                            found: tree.nodes[child].label,
                        });
                    }
                }
                let mut docs: Vec<usize> = Vec::new();
                for &child in children {
                    docs.extend(std::mem::take(&mut below[child]));
                }
                if centroid.len() != matrix.dim() {
                    out.push(Violation::CentroidDim {
                        node: id,
                        len: centroid.len(),
                    });
                } else if !docs.is_empty() {
                    let rows: Vec<&[f32]> = docs.iter().map(|&d| matrix.row(d)).collect();
                    let mean = mean_of(&rows, 0..rows.len(), matrix.dim());
                    if let Some((coord, (&stored, &m))) = centroid
                        .iter()
                        .zip(&mean)
                        .enumerate()
                        .find(|(_, (s, m))| !((*s - *m).abs() <= CENTROID_TOLERANCE))
                    {
                        out.push(Violation::CentroidMismatch {
                            node: id,
                            coord,
                            stored,
                            mean: m,
                        });
                    }
                }
                below[id] = docs;
            }
        }
    }
    for (doc_index, &count) in seen.iter().enumerate() {
        let doc_id = matrix.id(doc_index).to_string();
        if count == 0 {
            out.push(Violation::MissingDoc { doc_index, doc_id });
        } else if count > 1 {
            out.push(Violation::DuplicateDoc { doc_index, doc_id });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: &[Vec<f32>]) -> EmbeddingMatrix {
        let ids = (0..rows.len()).map(|i| format!("d{i}")).collect();
        EmbeddingMatrix::from_rows(ids, rows).unwrap()
    }

    fn sse(points: &[[f64; 2]], groups: &[Vec<usize>]) -> f64 {
        groups
            .iter()
            .filter(|g| !g.is_empty())
            .map(|g| {
                let n = g.len() as f64;
                let cx = g.iter().map(|&i| points[i][0]).sum::<f64>() / n;
                let cy = g.iter().map(|&i| points[i][1]).sum::<f64>() / n;
                g.iter()
                    .map(|&i| (points[i][0] - cx).powi(2) + (points[i][1] - cy).powi(2))
                    .sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn kmeans_two_blobs_matches_exhaustive_optimum() {
        let pts = [[0.0, 0.0], [0.0, 0.1], [10.0, 10.0], [10.0, 10.1]];
        // exhaustive oracle over all 2-partitions with both sides non-empty
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1u32..(1 << 4) - 1 {
            let a: Vec<usize> = (0..4).filter(|i| mask >> i & 1 == 1).collect();
            let b: Vec<usize> = (0..4).filter(|i| mask >> i & 1 == 0).collect();
            let cost = sse(&pts, &[a, b]);
            if cost < best.0 - 1e-12 {
                best = (cost, mask);
            }
        }
        assert!(best.1 == 0b0011 || best.1 == 0b1100);

        let rows: Vec<Vec<f32>> = pts.iter().map(|p| vec![p[0] as f32, p[1] as f32]).collect();
        let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
        for seed in 0..20 {
            let km = kmeans_cluster(&refs, 2, seed).unwrap();
            let mut groups = km.groups();
            groups.sort();
            assert_eq!(groups, vec![vec![0, 1], vec![2, 3]], "seed {seed}");
        }
    }

    #[test]
    fn kmeans_few_points_each_own_cluster() {
        let rows = [vec![1.0f32, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
        let km = kmeans_cluster(&refs, 4, 3).unwrap();
        assert_eq!(km.k(), 3);
        let mut a = km.assignments.clone();
        a.sort();
        a.dedup();
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn kmeans_identical_points_collapse() {
        let rows = vec![vec![2.0f32, 2.0]; 5];
        let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
        let km = kmeans_cluster(&refs, 3, 1).unwrap();
        assert_eq!(km.k(), 1);
        assert!(km.assignments.iter().all(|&a| a == 0));
        assert!(kmeans_cluster(&refs, 1, 1).is_err());
    }

    #[test]
    fn repair_fills_empty_cluster_with_farthest_point() {
        let rows = [vec![0.0f32], vec![1.0], vec![5.0]];
        let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
        let mut centroids = vec![vec![2.0], vec![100.0]];
        let mut assignments = vec![0, 0, 0];
        repair_empty(&refs, &mut centroids, &mut assignments);
        assert_eq!(assignments, vec![0, 0, 1]);
        assert_eq!(centroids[1], vec![5.0]);
    }

    #[test]
    fn single_doc_tree() {
        let m = matrix(&[vec![1.0, 2.0]]);
        let t = build_tree(&m, 2, 0).unwrap();
        assert_eq!(t.path(0), Some(DocIdPath(vec![1])));
        assert!(validate_tree(&t, &m).is_empty());
    }

    #[test]
    fn small_collection_is_depth_one() {
        let m = matrix(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let t = build_tree(&m, 4, 0).unwrap();
        assert_eq!(t.depth(), 1);
        for i in 0..3 {
            assert_eq!(t.path(i), Some(DocIdPath(vec![i as u32 + 1])));
        }
    }

    #[test]
    fn five_separated_docs() {
        let m = matrix(&[
            vec![0.0, 0.0],
            vec![0.0, 0.2],
            vec![10.0, 0.0],
            vec![10.0, 0.3],
            vec![-10.0, 10.0],
        ]);
        let t = build_tree(&m, 2, 7).unwrap();
        assert!(validate_tree(&t, &m).is_empty());
        let paths: Vec<DocIdPath> = (0..5).map(|i| t.path(i).unwrap()).collect();
        assert!(paths.iter().all(|p| p.0.len() >= 2));
        let unique: HashSet<_> = paths.iter().collect();
        assert_eq!(unique.len(), 5);
        for node in t.nodes() {
            if node.children().first().is_some_and(|&c| t.node(c).is_leaf()) {
                assert!(node.children().len() <= 2);
            }
        }
        for (i, p) in paths.iter().enumerate() {
            assert_eq!(t.resolve(p), Some(i));
        }
    }

    #[test]
    fn identical_embeddings_terminate_via_median_split() {
        let m = matrix(&vec![vec![0.5, 0.5]; 37]);
        let t = build_tree(&m, 2, 11).unwrap();
        assert!(validate_tree(&t, &m).is_empty());
        assert!(t.depth() <= 37);
        assert_eq!(t.leaf_count(), 37);
    }

    #[test]
    fn validate_flags_duplicate_leaf() {
        let m = matrix(&[vec![1.0], vec![2.0], vec![3.0]]);
        let t = build_tree(&m, 4, 0).unwrap();
        let mut rec = t.to_records();
        let leaf = rec.nodes.iter_mut().rev().find(|n| n.kind == RecordKind::Leaf).unwrap();
        leaf.doc_index = Some(0);
        let bad = SemanticTree::from_records(rec).unwrap();
        let v = validate_tree(&bad, &m);
        assert!(v.iter().any(|x| matches!(x, Violation::DuplicateDoc { doc_id, .. } if doc_id == "d0")));
        assert!(v.iter().any(|x| matches!(x, Violation::MissingDoc { doc_index: 2, .. })));
    }

    #[test]
    fn validate_flags_perturbed_centroid() {
        let m = matrix(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 5.0]]);
        let t = build_tree(&m, 2, 0).unwrap();
        let mut rec = t.to_records();
        rec.nodes[0].centroid.as_mut().unwrap()[1] += 1.0;
        let bad = SemanticTree::from_records(rec).unwrap();
        let v = validate_tree(&bad, &m);
        assert!(matches!(v.as_slice(), [Violation::CentroidMismatch { node: 0, coord: 1, .. }]));
    }

    #[test]
    fn json_roundtrip() {
        let rows: Vec<Vec<f32>> = (0..20).map(|i| vec![(i as f32).sin(), (i as f32 * 0.7).cos()]).collect();
        let m = matrix(&rows);
        let t = build_tree(&m, 3, 5).unwrap();
        let back = SemanticTree::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        let v: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(v["nodes"][0]["parent"], serde_json::Value::Null);
        assert_eq!(v["nodes"][0]["kind"], "internal");
    }

    #[test]
    fn from_records_rejects_forward_parent() {
        let rec = TreeRecords {
            c: 2,
            dim: 1,
            nodes: vec![NodeRecord {
                id: 0,
                parent: Some(0),
                label: None,
                kind: RecordKind::Internal,
                centroid: Some(vec![0.0]),
                doc_index: None,
            }],
        };
        assert!(SemanticTree::from_records(rec).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn build_is_deterministic_and_complete(
            n in 1usize..60, c in 2usize..6, seed in any::<u64>(), dup in any::<bool>()
        ) {
            let rows: Vec<Vec<f32>> = (0..n)
                .map(|i| {
                    let x = if dup { (i % 3) as f32 } else { ((i as u64).wrapping_mul(seed | 1) % 97) as f32 };
                    vec![x, (x * 0.37).sin()]
                })
                .collect();
            let m = matrix(&rows);
            let t1 = build_tree(&m, c, seed).unwrap();
            let t2 = build_tree(&m, c, seed).unwrap();
            prop_assert_eq!(&t1, &t2);
            prop_assert!(validate_tree(&t1, &m).is_empty());
            prop_assert!(t1.depth() <= n);
            let paths: HashSet<DocIdPath> = (0..n).map(|i| t1.path(i).unwrap()).collect();
            prop_assert_eq!(paths.len(), n);
            for i in 0..n {
                prop_assert_eq!(t1.resolve(&t1.path(i).unwrap()), Some(i));
            }
        }
    }
}
