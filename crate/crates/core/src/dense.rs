//! Dense retrieval: dot-product scoring, exact top-k, and tree-pruned search.
//!
//! Every ranking in the crate orders by score descending and breaks ties by
//! ascending position (matrix row for documents, construction order for tree
//! nodes), so rankings produced by different paths can be compared exactly.

use std::cmp::Ordering;

use crate::corpus::{EmbeddingMatrix, RunEntry};
use crate::error::{Error, Result};
use crate::tree::{NodeKind, SemanticTree, ROOT};

/// Dot product accumulated in f64, left to right.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn dot_f64(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y).sum()
}

/// Descending score, then ascending position.
pub fn rank_cmp(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Sorts `(score, position)` pairs by [`rank_cmp`] and keeps the first `k`.
pub fn top_k(mut scored: Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    if k < scored.len() {
        scored.select_nth_unstable_by(k, |a, b| rank_cmp(*a, *b));
        scored.truncate(k);
    }
    scored.sort_by(|a, b| rank_cmp(*a, *b));
    scored
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    /// Row in the embedding matrix (or ordinal in the collection).
    pub index: usize,
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedList {
    pub hits: Vec<ScoredDoc>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn doc_ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.doc_id.as_str()).collect()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.hits.iter().map(|h| h.index).collect()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ScoredDoc> {
        self.hits.iter()
    }

    pub fn run_entries(&self) -> Vec<RunEntry> {
        self.hits
            .iter()
            .enumerate()
            .map(|(i, h)| RunEntry {
                doc_id: h.doc_id.clone(),
                rank: i + 1,
                score: h.score,
            })
            .collect()
    }

    pub(crate) fn from_scored(scored: Vec<(f64, usize)>, ids: &[String]) -> Self {
        RankedList {
            hits: scored
                .into_iter()
                .map(|(score, index)| ScoredDoc {
                    index,
                    doc_id: ids[index].clone(),
                    score,
                })
                .collect(),
        }
    }
}

fn check_query(q: &[f32], dim: usize) -> Result<()> {
    if q.len() != dim {
        return Err(Error::arg(format!(
            "query has dimension {}, index has {dim}",
            q.len()
        )));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("query vector contains non-finite values"));
    }
    Ok(())
}

/// One dot product per document, in matrix order.
pub fn score_all(q: &[f32], matrix: &EmbeddingMatrix) -> Result<Vec<f64>> {
    check_query(q, matrix.dim())?;
    Ok(matrix.rows().map(|row| dot(q, row)).collect())
}

/// Numerically stable softmax.
pub fn softmax_probs(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::arg("softmax of an empty score vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::arg("softmax input contains non-finite values"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `ln Σ exp(sᵢ)` with max subtraction.
pub fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

/// Positions ordered by [`rank_cmp`].
pub fn argsort(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| rank_cmp((scores[a], a), (scores[b], b)));
    idx
}

/// Exact maximum inner product search.
pub fn flat_search(q: &[f32], matrix: &EmbeddingMatrix, k: usize) -> Result<RankedList> {
    if k < 1 {
        return Err(Error::arg("k must be >= 1"));
    }
    let scores = score_all(q, matrix)?;
    let scored = scores.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
    Ok(RankedList::from_scored(top_k(scored, k), matrix.ids()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeSearch {
    pub ranking: RankedList,
    /// Node ids kept at each level below the root, ascending.
    pub visited: Vec<Vec<usize>>,
    /// Doc indices of every leaf reached, in the order they were reached.
    pub candidates: Vec<usize>,
}

/// Score of a tree node against a query: centroid for internal nodes, the
/// document row for leaves.
pub(crate) fn node_score(
    q: &[f32],
    tree: &SemanticTree,
    matrix: &EmbeddingMatrix,
    node: usize,
) -> Result<f64> {
    match &tree.node(node).kind {
        NodeKind::Internal { centroid, .. } => Ok(dot_f64(q, centroid)),
        NodeKind::Leaf { doc_index } => {
            if *doc_index >= matrix.len() {
                return Err(Error::arg(format!(
                    "leaf {node} references doc {doc_index}, matrix has {}",
                    matrix.len()
                )));
            }
            Ok(dot(q, matrix.row(*doc_index)))
        }
    }
}

pub(crate) fn check_tree(q: &[f32], tree: &SemanticTree, matrix: &EmbeddingMatrix) -> Result<()> {
    if tree.dim() != matrix.dim() {
        return Err(Error::arg(format!(
            "tree dim {} != matrix dim {}",
            tree.dim(),
            matrix.dim()
        )));
    }
    check_query(q, matrix.dim())
}

/// Tree-index search: at each level keep the `nprobe` best children of the
/// current frontier; leaves kept at any level become candidates, which are
/// finally ranked by their document score.
pub fn tree_search(
    q: &[f32],
    tree: &SemanticTree,
    matrix: &EmbeddingMatrix,
    nprobe: usize,
    k: usize,
) -> Result<TreeSearch> {
    if nprobe < 1 || k < 1 {
        return Err(Error::arg("nprobe and k must be >= 1"));
    }
    check_tree(q, tree, matrix)?;
    let mut frontier = vec![ROOT];
    let mut visited = Vec::new();
    let mut candidates = Vec::new();
    let mut cand_scores = Vec::new();
    while !frontier.is_empty() {
        let mut scored = Vec::new();
        for &node in &frontier {
            for &child in tree.children(node) {
                scored.push((node_score(q, tree, matrix, child)?, child));
            }
        }
        if scored.is_empty() {
            break;
        }
        let mut kept = top_k(scored, nprobe);
        kept.sort_by_key(|&(_, id)| id);
        frontier.clear();
        for &(score, id) in &kept {
            match tree.node(id).kind {
                NodeKind::Leaf { doc_index } => {
                    candidates.push(doc_index);
                    cand_scores.push((score, doc_index));
                }
                NodeKind::Internal { .. } => frontier.push(id),
            }
        }
        visited.push(kept.into_iter().map(|(_, id)| id).collect());
    }
    Ok(TreeSearch {
        ranking: RankedList::from_scored(top_k(cand_scores, k), matrix.ids()),
        visited,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::build_tree;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: &[Vec<f32>]) -> EmbeddingMatrix {
        let ids = (0..rows.len()).map(|i| format!("d{}", i + 1)).collect();
        EmbeddingMatrix::from_rows(ids, rows).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingMatrix {
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        matrix(&rows)
    }

    #[test]
    fn score_all_examples() {
        let m = matrix(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        assert_eq!(score_all(&[1.0, 0.0, 0.0], &m).unwrap(), vec![1.0, 0.0]);
        assert_eq!(score_all(&[0.0; 3], &m).unwrap(), vec![0.0, 0.0]);
        let m = matrix(&[vec![1.0, 1.0], vec![3.0, 0.0], vec![0.0, 4.0]]);
        assert_eq!(score_all(&[2.0, -1.0], &m).unwrap(), vec![1.0, 6.0, -4.0]);
        assert!(score_all(&[1.0], &m).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_probs(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax_probs(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = [3.0, 1.0, 2.0];
        assert_eq!(argsort(&softmax_probs(&s).unwrap()), argsort(&s));
        assert!(softmax_probs(&[]).is_err());
        let p = softmax_probs(&[1000.0, 999.0]).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn flat_search_examples() {
        let m = matrix(&[vec![1.0, 1.0], vec![3.0, 0.0], vec![0.0, 4.0]]);
        let r = flat_search(&[2.0, -1.0], &m, 2).unwrap();
        assert_eq!(r.doc_ids(), vec!["d2", "d1"]);
        assert_eq!(r.hits[0].score, 6.0);
        assert_eq!(r.hits[1].score, 1.0);
        let all = flat_search(&[2.0, -1.0], &m, 10).unwrap();
        assert_eq!(all.doc_ids(), vec!["d2", "d1", "d3"]);
        assert!(flat_search(&[2.0, -1.0], &m, 0).is_err());

        let twins = matrix(&[vec![0.0, 1.0], vec![0.5, 0.5], vec![0.5, 0.5]]);
        let r = flat_search(&[1.0, 0.0], &twins, 3).unwrap();
        assert_eq!(r.indices(), vec![1, 2, 0]);
    }

    #[test]
    fn depth_one_tree_equals_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(&mut rng, 6, 4);
        let t = build_tree(&m, 8, 1).unwrap();
        assert_eq!(t.depth(), 1);
        let q: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        for k in 1..=6 {
            for nprobe in k..=8 {
                let ts = tree_search(&q, &t, &m, nprobe, k).unwrap();
                assert_eq!(ts.ranking, flat_search(&q, &m, k).unwrap());
            }
        }
    }

    #[test]
    fn nprobe_one_stays_in_query_cluster() {
        let m = matrix(&[
            vec![10.0, 0.0],
            vec![10.0, 1.0],
            vec![-10.0, 0.0],
            vec![-10.0, 1.0],
        ]);
        let t = build_tree(&m, 2, 0).unwrap();
        // brute force confirms the A members top the dot-product ranking
        let q = [10.0f32, 0.5];
        let brute = flat_search(&q, &m, 2).unwrap();
        let mut top: Vec<usize> = brute.indices();
        top.sort();
        assert_eq!(top, vec![0, 1]);
        let ts = tree_search(&q, &t, &m, 1, 2).unwrap();
        let mut got = ts.ranking.indices();
        got.sort();
        // nprobe=1 keeps one node per level, so only one leaf survives
        assert!(got.iter().all(|i| [0, 1].contains(i)));
        let ts2 = tree_search(&q, &t, &m, 2, 2).unwrap();
        let mut got2 = ts2.ranking.indices();
        got2.sort();
        assert_eq!(got2, vec![0, 1]);
    }

    #[test]
    fn exhaustive_nprobe_recovers_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..30 {
            let n = rng.random_range(1..200);
            let d = rng.random_range(1..9);
            let m = random_matrix(&mut rng, n, d);
            let t = build_tree(&m, rng.random_range(2..6), trial).unwrap();
            let q: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k = rng.random_range(1..=n);
            let ts = tree_search(&q, &t, &m, t.max_level_width(), k).unwrap();
            assert_eq!(ts.ranking, flat_search(&q, &m, k).unwrap());
        }
    }

    #[test]
    fn first_level_selection_is_nested_in_nprobe() {
        // Deeper levels may drop a node when a larger frontier brings in
        // better-scoring siblings; the first level never does.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..40 {
            let m = random_matrix(&mut rng, 120, 4);
            let t = build_tree(&m, 3, trial).unwrap();
            let q: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            for nprobe in 1..4 {
                let a = tree_search(&q, &t, &m, nprobe, 1).unwrap();
                let b = tree_search(&q, &t, &m, nprobe + 1, 1).unwrap();
                assert!(a.visited[0].iter().all(|n| b.visited[0].contains(n)));
            }
        }
    }

    #[test]
    fn deeper_candidate_sets_are_not_nested() {
        // root -> {A, X}; A -> {a}; X -> {x1, x2, x3}. X's centroid is dragged
        // down by x3, so nprobe=1 keeps A and then a. With nprobe=2 both x1
        // and x2 outscore a at the second level and a is dropped.
        let m = matrix(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![2.0, 0.0], vec![-5.0, 0.0]]);
        let records = crate::tree::TreeRecords {
            c: 3,
            dim: 2,
            nodes: vec![
                rec(0, None, None, Some(vec![0.0, 0.0])),
                rec(1, Some(0), Some(1), Some(vec![1.0, 0.0])),
                leaf(2, 1, 1, 0),
                rec(3, Some(0), Some(2), Some(vec![-1.0 / 3.0, 0.0])),
                leaf(4, 3, 1, 1),
                leaf(5, 3, 2, 2),
                leaf(6, 3, 3, 3),
            ],
        };
        let t = SemanticTree::from_records(records).unwrap();
        assert!(crate::tree::validate_tree(&t, &m).is_empty());
        let q = [1.0f32, 0.0];
        let one = tree_search(&q, &t, &m, 1, 4).unwrap();
        let two = tree_search(&q, &t, &m, 2, 4).unwrap();
        assert_eq!(one.candidates, vec![0]);
        assert_eq!(two.candidates, vec![1, 2]);
    }

    fn rec(id: usize, parent: Option<usize>, label: Option<u32>, centroid: Option<Vec<f64>>) -> crate::tree::NodeRecord {
        crate::tree::NodeRecord {
            id,
            parent,
            label,
            kind: crate::tree::RecordKind::Internal,
            centroid,
            doc_index: None,
        }
    }

    fn leaf(id: usize, parent: usize, label: u32, doc: usize) -> crate::tree::NodeRecord {
        crate::tree::NodeRecord {
            id,
            parent: Some(parent),
            label: Some(label),
            kind: crate::tree::RecordKind::Leaf,
            centroid: None,
            doc_index: Some(doc),
        }
    }

    proptest! {
        #[test]
        fn softmax_preserves_ranking(scores in proptest::collection::vec(-30.0f64..30.0, 1..40)) {
            prop_assert_eq!(argsort(&softmax_probs(&scores).unwrap()), argsort(&scores));
            let p = softmax_probs(&scores).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn full_flat_search_is_a_sorted_permutation(seed in any::<u64>(), n in 1usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, n, 3);
            let q: Vec<f32> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = flat_search(&q, &m, n).unwrap();
            let mut idx = r.indices();
            idx.sort();
            prop_assert_eq!(idx, (0..n).collect::<Vec<_>>());
            prop_assert!(r.hits.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }
}
