//! Generative decoding of document identifiers.
//!
//! Atomic decoding is a single softmax over one logit per document, each
//! logit being the dot product of the decoder state with that document's
//! identifier embedding. Hierarchical decoding walks the semantic trie: at a
//! node, the logits are dot products of the (fixed) decoder state with the
//! children's embeddings (centroids for internal children, document rows for
//! leaves), and a beam keeps the best partial paths.

use std::fmt;
use std::str::FromStr;

use crate::corpus::EmbeddingMatrix;
use crate::dense::{check_tree, flat_search, log_sum_exp, node_score, rank_cmp, score_all, softmax_probs, top_k, RankedList, ScoredDoc};
use crate::error::{Error, Result};
use crate::tree::{DocIdPath, NodeKind, SemanticTree, ROOT};

#[derive(Debug, Clone, PartialEq)]
pub struct AtomicDecoding {
    /// Top-k documents scored by generation probability.
    pub ranking: RankedList,
    /// Pre-softmax logits aligned with `ranking`.
    pub logits: Vec<f64>,
}

impl AtomicDecoding {
    /// The same ranking with logits as scores.
    pub fn logit_ranking(&self) -> RankedList {
        RankedList {
            hits: self
                .ranking
                .hits
                .iter()
                .zip(&self.logits)
                .map(|(h, &score)| ScoredDoc { score, ..h.clone() })
                .collect(),
        }
    }
}

/// Single-step decoding over one token per document.
pub fn decode_atomic(h: &[f32], matrix: &EmbeddingMatrix, k: usize) -> Result<AtomicDecoding> {
    let logits_all = score_all(h, matrix)?;
    let ranked = flat_search(h, matrix, k)?;
    if ranked.is_empty() {
        return Ok(AtomicDecoding {
            ranking: ranked,
            logits: Vec::new(),
        });
    }
    let probs = softmax_probs(&logits_all)?;
    let logits = ranked.hits.iter().map(|hit| hit.score).collect();
    let ranking = RankedList {
        hits: ranked
            .hits
            .into_iter()
            .map(|hit| ScoredDoc {
                score: probs[hit.index],
                ..hit
            })
            .collect(),
    };
    Ok(AtomicDecoding { ranking, logits })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneBy {
    /// Sum of per-step log-probabilities along the path.
    CumulativeLogprob,
    /// The raw logit of the newest step, compared across the whole frontier.
    StepLogit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankBy {
    CumulativeLogprob,
    /// Dot product of the decoder state with the document row.
    LeafDot,
}

impl FromStr for PruneBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cumulative_logprob" | "cumulative-logprob" => Ok(PruneBy::CumulativeLogprob),
            "step_logit" | "step-logit" => Ok(PruneBy::StepLogit),
            other => Err(Error::arg(format!("unknown prune mode {other:?}"))),
        }
    }
}

impl FromStr for RankBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cumulative_logprob" | "cumulative-logprob" => Ok(RankBy::CumulativeLogprob),
            "leaf_dot" | "leaf-dot" => Ok(RankBy::LeafDot),
            other => Err(Error::arg(format!("unknown rank mode {other:?}"))),
        }
    }
}

impl fmt::Display for PruneBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneBy::CumulativeLogprob => "cumulative_logprob",
            PruneBy::StepLogit => "step_logit",
        })
    }
}

impl fmt::Display for RankBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankBy::CumulativeLogprob => "cumulative_logprob",
            RankBy::LeafDot => "leaf_dot",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeamConfig {
    pub width: usize,
    pub prune_by: PruneBy,
    pub rank_by: RankBy,
}

impl BeamConfig {
    /// Native generative ranking: cumulative log-probability for both
    /// pruning and final ranking.
    pub fn generative(width: usize) -> Self {
        BeamConfig {
            width,
            prune_by: PruneBy::CumulativeLogprob,
            rank_by: RankBy::CumulativeLogprob,
        }
    }

    /// Prunes and ranks like a tree index over the same embeddings.
    pub fn dense_equivalent(width: usize) -> Self {
        BeamConfig {
            width,
            prune_by: PruneBy::StepLogit,
            rank_by: RankBy::LeafDot,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPath {
    pub path: DocIdPath,
    pub doc_index: usize,
    pub doc_id: String,
    pub cumulative_logprob: f64,
    pub leaf_dot: f64,
}

impl DecodedPath {
    pub fn score(&self, rank_by: RankBy) -> f64 {
        match rank_by {
            RankBy::CumulativeLogprob => self.cumulative_logprob,
            RankBy::LeafDot => self.leaf_dot,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamDecoding {
    pub paths: Vec<DecodedPath>,
    /// Node ids kept by the beam at each step, ascending.
    pub visited: Vec<Vec<usize>>,
}

impl BeamDecoding {
    pub fn doc_indices(&self) -> Vec<usize> {
        self.paths.iter().map(|p| p.doc_index).collect()
    }

    pub fn ranking(&self, rank_by: RankBy) -> RankedList {
        RankedList {
            hits: self
                .paths
                .iter()
                .map(|p| ScoredDoc {
                    index: p.doc_index,
                    doc_id: p.doc_id.clone(),
                    score: p.score(rank_by),
                })
                .collect(),
        }
    }
}

struct Expansion {
    node: usize,
    logit: f64,
    logprob: f64,
}

/// Beam search over the trie. The decoder state `h` is held fixed across
/// steps.
pub fn decode_beam(
    h: &[f32],
    tree: &SemanticTree,
    matrix: &EmbeddingMatrix,
    config: BeamConfig,
    k: usize,
) -> Result<BeamDecoding> {
    if config.width < 1 || k < 1 {
        return Err(Error::arg("beam width and k must be >= 1"));
    }
    check_tree(h, tree, matrix)?;
    let mut beam: Vec<(usize, f64)> = vec![(ROOT, 0.0)];
    let mut visited = Vec::new();
    let mut completed: Vec<(usize, f64, f64)> = Vec::new();

    while !beam.is_empty() {
        let mut expansions = Vec::new();
        for &(node, logprob) in &beam {
            let children = tree.children(node);
            if children.is_empty() {
                continue;
            }
            let logits = children
                .iter()
                .map(|&c| node_score(h, tree, matrix, c))
                .collect::<Result<Vec<_>>>()?;
            let norm = log_sum_exp(&logits);
            for (&child, &logit) in children.iter().zip(&logits) {
                expansions.push(Expansion {
                    node: child,
                    logit,
                    logprob: logprob + (logit - norm),
                });
            }
        }
        if expansions.is_empty() {
            break;
        }
        // node-id order makes the positional tie-break a construction-order one
        expansions.sort_by_key(|e| e.node);
        let keyed: Vec<(f64, usize)> = expansions
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let key = match config.prune_by {
                    PruneBy::CumulativeLogprob => e.logprob,
                    PruneBy::StepLogit => e.logit,
                };
                (key, i)
            })
            .collect();
        let mut kept: Vec<usize> = top_k(keyed, config.width).into_iter().map(|(_, i)| i).collect();
        kept.sort_unstable();
        beam.clear();
        let mut level = Vec::with_capacity(kept.len());
        for i in kept {
            let e = &expansions[i];
            level.push(e.node);
            match tree.node(e.node).kind {
                NodeKind::Leaf { doc_index } => completed.push((doc_index, e.logprob, e.logit)),
                NodeKind::Internal { .. } => beam.push((e.node, e.logprob)),
            }
        }
        visited.push(level);
    }

    let ranked: Vec<(f64, usize)> = completed
        .iter()
        .enumerate()
        .map(|(i, &(_, logprob, leaf_dot))| {
            let key = match config.rank_by {
                RankBy::CumulativeLogprob => logprob,
                RankBy::LeafDot => leaf_dot,
            };
            (key, i)
        })
        .collect();
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| {
        rank_cmp(
            (ranked[a].0, completed[a].0),
            (ranked[b].0, completed[b].0),
        )
    });
    let paths = order
        .into_iter()
        .take(k)
        .map(|i| {
            let (doc_index, cumulative_logprob, leaf_dot) = completed[i];
            DecodedPath {
                path: tree.path_of_node(tree.leaf_of(doc_index).expect("completed leaf is in tree")),
                doc_index,
                doc_id: matrix.id(doc_index).to_string(),
                cumulative_logprob,
                leaf_dot,
            }
        })
        .collect();
    Ok(BeamDecoding { paths, visited })
}

/// Generation probability of every document: the product of per-step
/// softmax probabilities along its path. Indexed by matrix row.
pub fn enumerate_leaf_probs(
    h: &[f32],
    tree: &SemanticTree,
    matrix: &EmbeddingMatrix,
) -> Result<Vec<f64>> {
    check_tree(h, tree, matrix)?;
    let mut probs = vec![0.0; matrix.len()];
    let mut stack = vec![(ROOT, 1.0f64)];
    while let Some((node, p)) = stack.pop() {
        match tree.node(node).kind {
            NodeKind::Leaf { doc_index } => probs[doc_index] += p,
            NodeKind::Internal { ref children, .. } => {
                let logits = children
                    .iter()
                    .map(|&c| node_score(h, tree, matrix, c))
                    .collect::<Result<Vec<_>>>()?;
                let step = softmax_probs(&logits)?;
                for (&child, s) in children.iter().zip(step) {
                    stack.push((child, p * s));
                }
            }
        }
    }
    Ok(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::tree_search;
    use crate::tree::build_tree;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: &[Vec<f32>]) -> EmbeddingMatrix {
        let ids = (0..rows.len()).map(|i| format!("d{i}")).collect();
        EmbeddingMatrix::from_rows(ids, rows).unwrap()
    }

    fn random_case(seed: u64, n: usize, d: usize) -> (EmbeddingMatrix, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let h = (0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        (matrix(&rows), h)
    }

    #[test]
    fn atomic_basis_example() {
        let m = matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let out = decode_atomic(&[1.0, 0.0], &m, 1).unwrap();
        let e = std::f64::consts::E;
        assert_eq!(out.ranking.indices(), vec![0]);
        assert!((out.ranking.hits[0].score - e / (e + 1.0)).abs() < 1e-15);
        assert_eq!(out.logits, vec![1.0]);
    }

    #[test]
    fn atomic_single_doc() {
        let m = matrix(&[vec![0.3, -0.7]]);
        let out = decode_atomic(&[5.0, 5.0], &m, 3).unwrap();
        assert_eq!(out.ranking.hits[0].score, 1.0);
    }

    #[test]
    fn atomic_order_is_flat_order() {
        for seed in 0..50 {
            let (m, h) = random_case(seed, 80, 6);
            for k in [1, 10, 100] {
                let a = decode_atomic(&h, &m, k).unwrap();
                let f = flat_search(&h, &m, k).unwrap();
                assert_eq!(a.ranking.doc_ids(), f.doc_ids());
                assert_eq!(a.logit_ranking(), f);
            }
        }
    }

    #[test]
    fn greedy_beam_follows_nprobe_one() {
        for seed in 0..40 {
            let (m, h) = random_case(seed, 150, 5);
            let t = build_tree(&m, 2 + (seed as usize % 4), seed).unwrap();
            let beam = decode_beam(&h, &t, &m, BeamConfig::generative(1), 1).unwrap();
            let ts = tree_search(&h, &t, &m, 1, 1).unwrap();
            assert_eq!(beam.visited, ts.visited);
            assert_eq!(beam.doc_indices(), ts.ranking.indices());
        }
    }

    #[test]
    fn dense_equivalent_beam_matches_tree_search() {
        for seed in 0..40 {
            let (m, h) = random_case(seed, 120, 4);
            let t = build_tree(&m, 3, seed).unwrap();
            for width in [1, 2, 4, 7] {
                let beam = decode_beam(&h, &t, &m, BeamConfig::dense_equivalent(width), 10).unwrap();
                let ts = tree_search(&h, &t, &m, width, 10).unwrap();
                assert_eq!(beam.visited, ts.visited);
                assert_eq!(beam.ranking(RankBy::LeafDot), ts.ranking);
            }
            let wide = BeamConfig {
                width: usize::MAX,
                prune_by: PruneBy::CumulativeLogprob,
                rank_by: RankBy::LeafDot,
            };
            let beam = decode_beam(&h, &t, &m, wide, 15).unwrap();
            assert_eq!(beam.ranking(RankBy::LeafDot), flat_search(&h, &m, 15).unwrap());
        }
    }

    #[test]
    fn leaf_probs_depth_one_equal_softmax() {
        let (m, h) = random_case(4, 6, 3);
        let t = build_tree(&m, 8, 0).unwrap();
        let probs = enumerate_leaf_probs(&h, &t, &m).unwrap();
        let soft = softmax_probs(&score_all(&h, &m).unwrap()).unwrap();
        for (a, b) in probs.iter().zip(&soft) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn exhaustive_beam_orders_like_enumeration() {
        let m = matrix(&[
            vec![0.0, 0.0],
            vec![0.0, 0.4],
            vec![3.0, 0.0],
            vec![3.0, 0.5],
            vec![-2.0, 3.0],
        ]);
        let t = build_tree(&m, 2, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let h: Vec<f32> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let probs = enumerate_leaf_probs(&h, &t, &m).unwrap();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let beam = decode_beam(&h, &t, &m, BeamConfig::generative(usize::MAX), 5).unwrap();
            let mut expect: Vec<usize> = (0..5).collect();
            expect.sort_by(|&a, &b| rank_cmp((probs[a], a), (probs[b], b)));
            assert_eq!(beam.doc_indices(), expect);
            for p in &beam.paths {
                assert!((p.cumulative_logprob.exp() - probs[p.doc_index]).abs() < 1e-12);
                assert!(p.cumulative_logprob <= 0.0);
                assert_eq!(t.resolve(&p.path), Some(p.doc_index));
            }
        }
    }

    #[test]
    fn exhaustive_beam_top1_dominates_narrow_beams() {
        for seed in 0..30 {
            let (m, h) = random_case(seed, 90, 3);
            let t = build_tree(&m, 3, seed).unwrap();
            let best = decode_beam(&h, &t, &m, BeamConfig::generative(usize::MAX), 1).unwrap();
            for width in 1..6 {
                let narrow = decode_beam(&h, &t, &m, BeamConfig::generative(width), 1).unwrap();
                assert!(best.paths[0].cumulative_logprob >= narrow.paths[0].cumulative_logprob);
            }
        }
    }

    #[test]
    fn wider_beam_can_finish_worse() {
        // root -> {A, B}. A -> {a1, a2, a3, a4}, each an internal node with a
        // single leaf. B -> {b1}, b1 -> {b1x, b1y} (internal) each with 8
        // leaves. Logits are chosen so that width 1 follows A to a leaf at
        // about -1.9 while width 2 keeps both b1 children at level three and
        // then finishes inside them at about -3.9.
        let mut rows = vec![vec![0.0f32, 0.0]; 4];
        rows.extend(std::iter::repeat_n(vec![0.0f32, 0.0], 16));
        let m = matrix(&rows);
        let mut nodes = Vec::new();
        let mut next = 0usize;
        let mut add = |parent: Option<usize>, label: Option<u32>, leaf: Option<usize>, nodes: &mut Vec<crate::tree::NodeRecord>| {
            let id = next;
            next += 1;
            nodes.push(crate::tree::NodeRecord {
                id,
                parent,
                label,
                kind: if leaf.is_some() { crate::tree::RecordKind::Leaf } else { crate::tree::RecordKind::Internal },
                centroid: if leaf.is_some() { None } else { Some(vec![0.0, 0.0]) },
                doc_index: leaf,
            });
            id
        };
        let root = add(None, None, None, &mut nodes);
        let a = add(Some(root), Some(1), None, &mut nodes);
        for j in 0..4 {
            let aj = add(Some(a), Some(j + 1), None, &mut nodes);
            add(Some(aj), Some(1), Some(j as usize), &mut nodes);
        }
        let b = add(Some(root), Some(2), None, &mut nodes);
        let b1 = add(Some(b), Some(1), None, &mut nodes);
        let mut doc = 4;
        for j in 0..2 {
            let bx = add(Some(b1), Some(j + 1), None, &mut nodes);
            for l in 0..8 {
                add(Some(bx), Some(l + 1), Some(doc), &mut nodes);
                doc += 1;
            }
        }
        // Give A a larger logit than B via the centroid x-coordinate.
        nodes[a].centroid = Some(vec![0.4, 0.0]);
        let t = SemanticTree::from_records(crate::tree::TreeRecords { c: 8, dim: 2, nodes }).unwrap();
        let h = [1.0f32, 0.0];
        let narrow = decode_beam(&h, &t, &m, BeamConfig::generative(1), 1).unwrap();
        let wide = decode_beam(&h, &t, &m, BeamConfig::generative(2), 1).unwrap();
        assert!(wide.paths[0].cumulative_logprob < narrow.paths[0].cumulative_logprob);
    }
}
