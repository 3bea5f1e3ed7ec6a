//! Seeded self-checks of the cross-module equivalences.
//!
//! Each check draws random instances from a seed, compares two independent
//! code paths and reports the first disagreement it finds.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bm25::{build_bm25, bm25_search, idf, Bm25Params};
use crate::corpus::{Collection, Document, EmbeddingMatrix};
use crate::decoder::{decode_atomic, decode_beam, enumerate_leaf_probs, BeamConfig};
use crate::dense::{flat_search, rank_cmp, tree_search};
use crate::encoder::{featurize, tokenize, EncoderParams};
use crate::error::Result;
use crate::trainer::{compute_gradients, FreeEmbeddingTable, Model, TrainBatch, TrainConfig, TrainMode};
use crate::tree::{build_tree, validate_tree};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub instances: usize,
    /// First failing instance, if any.
    pub failure: Option<String>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.failure {
            None => write!(f, "PASS\t{}\t{} instances", self.name, self.instances),
            Some(why) => write!(f, "FAIL\t{}\t{why}", self.name),
        }
    }
}

fn run_check(
    name: &'static str,
    instances: usize,
    seed: u64,
    mut one: impl FnMut(&mut ChaCha8Rng) -> Result<Option<String>>,
) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..instances {
        let failure = match one(&mut rng) {
            Ok(None) => continue,
            Ok(Some(why)) => why,
            Err(e) => format!("error: {e}"),
        };
        return CheckReport {
            name,
            instances,
            failure: Some(format!("instance {i}: {failure}")),
        };
    }
    CheckReport {
        name,
        instances,
        failure: None,
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<EmbeddingMatrix> {
    let values = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    EmbeddingMatrix::new(d, (0..n).map(|i| format!("d{i}")).collect(), values)
}

fn random_query(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

const BRANCHINGS: [usize; 3] = [2, 4, 8];

pub fn check_atomic_flat(instances: usize, seed: u64) -> CheckReport {
    run_check("atomic == flat", instances, seed, |rng| {
        let n = rng.random_range(1..=512);
        let d = rng.random_range(1..=32);
        let m = random_matrix(rng, n, d)?;
        let q = random_query(rng, d);
        for k in [1, 10, 100] {
            let atomic = decode_atomic(&q, &m, k)?.logit_ranking();
            let flat = flat_search(&q, &m, k)?;
            let same = atomic.hits.len() == flat.hits.len()
                && atomic
                    .hits
                    .iter()
                    .zip(&flat.hits)
                    .all(|(a, b)| a.index == b.index && a.score.to_bits() == b.score.to_bits());
            if !same {
                return Ok(Some(format!("n={n} d={d} k={k}")));
            }
        }
        Ok(None)
    })
}

pub fn check_greedy_nprobe1(instances: usize, seed: u64) -> CheckReport {
    run_check("greedy beam == nprobe 1", instances, seed, |rng| {
        let n = rng.random_range(1..=300);
        let d = rng.random_range(1..=16);
        let c = BRANCHINGS[rng.random_range(0..3)];
        let m = random_matrix(rng, n, d)?;
        let tree = build_tree(&m, c, rng.random())?;
        let q = random_query(rng, d);
        let beam = decode_beam(&q, &tree, &m, BeamConfig::generative(1), 1)?;
        let ts = tree_search(&q, &tree, &m, 1, 1)?;
        if beam.visited != ts.visited || beam.doc_indices() != ts.ranking.indices() {
            return Ok(Some(format!("n={n} C={c}")));
        }
        Ok(None)
    })
}

pub fn check_dense_equivalent_beam(instances: usize, seed: u64) -> CheckReport {
    run_check("dense-equivalent beam == tree search", instances, seed, |rng| {
        let n = rng.random_range(1..=300);
        let d = rng.random_range(1..=16);
        let c = BRANCHINGS[rng.random_range(0..3)];
        let m = random_matrix(rng, n, d)?;
        let tree = build_tree(&m, c, rng.random())?;
        let q = random_query(rng, d);
        for width in [1, 2, 4] {
            for k in [1, 10] {
                let beam = decode_beam(&q, &tree, &m, BeamConfig::dense_equivalent(width), k)?;
                let ts = tree_search(&q, &tree, &m, width, k)?;
                if beam.visited != ts.visited || beam.ranking(crate::decoder::RankBy::LeafDot) != ts.ranking {
                    return Ok(Some(format!("n={n} C={c} B={width} k={k}")));
                }
            }
        }
        let exhaustive = decode_beam(&q, &tree, &m, BeamConfig::dense_equivalent(usize::MAX), 10)?;
        if exhaustive.ranking(crate::decoder::RankBy::LeafDot) != flat_search(&q, &m, 10)? {
            return Ok(Some(format!("n={n} C={c} exhaustive beam differs from flat")));
        }
        Ok(None)
    })
}

pub fn check_leaf_normalization(instances: usize, seed: u64) -> CheckReport {
    run_check("leaf probabilities sum to 1", instances, seed, |rng| {
        let n = rng.random_range(1..=2048);
        let d = rng.random_range(1..=8);
        let c = BRANCHINGS[rng.random_range(0..3)];
        let m = random_matrix(rng, n, d)?;
        let tree = build_tree(&m, c, rng.random())?;
        let q: Vec<f32> = random_query(rng, d).iter().map(|x| x * 5.0).collect();
        let total: f64 = enumerate_leaf_probs(&q, &tree, &m)?.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Ok(Some(format!("n={n} C={c} sum={total}")));
        }
        Ok(None)
    })
}

pub fn check_tree_validity(instances: usize, seed: u64) -> CheckReport {
    run_check("tree validity", instances, seed, |rng| {
        let n = rng.random_range(1..=600);
        let d = rng.random_range(1..=8);
        let c = [2, 4, 8, 16][rng.random_range(0..4)];
        let m = if rng.random_bool(0.1) {
            let row = random_query(rng, d);
            EmbeddingMatrix::new(d, (0..n).map(|i| format!("d{i}")).collect(), row.repeat(n))?
        } else {
            random_matrix(rng, n, d)?
        };
        let tree = build_tree(&m, c, rng.random())?;
        let violations = validate_tree(&tree, &m);
        Ok(violations.first().map(|v| format!("n={n} C={c}: {v}")))
    })
}

/// Finite-difference check of every trainable coordinate for all three
/// objectives, on small random instances.
pub fn check_gradients(instances: usize, seed: u64) -> CheckReport {
    run_check("analytic gradients == finite differences", instances, seed, |rng| {
        for mode in [TrainMode::TiedContrastive, TrainMode::TiedMarginMse, TrainMode::FreeDsi] {
            let features = rng.random_range(4..=32);
            let dim = rng.random_range(1..=8);
            let n_docs = rng.random_range(2..=16);
            let normalize = rng.random_bool(0.5);
            let mut encoder = EncoderParams::random(features, dim, 0.5, normalize, rng.random())?;
            for b in &mut encoder.bias {
                *b = rng.random_range(-0.3..0.3);
            }
            let docs: Vec<_> = (0..n_docs)
                .map(|_| {
                    let text: Vec<String> = (0..rng.random_range(1..6)).map(|_| format!("w{}", rng.random_range(0..40))).collect();
                    featurize(&text.join(" "), features)
                })
                .collect();
            let n_items = rng.random_range(1..=3);
            let mut batch = TrainBatch::default();
            let mut margins = Vec::new();
            for _ in 0..n_items {
                let text: Vec<String> = (0..rng.random_range(1..4)).map(|_| format!("w{}", rng.random_range(0..40))).collect();
                batch.inputs.push(featurize(&text.join(" "), features));
                let pos = rng.random_range(0..n_docs);
                batch.positives.push(pos);
                let negs: Vec<usize> = if mode == TrainMode::FreeDsi {
                    Vec::new()
                } else {
                    (0..n_docs).filter(|&j| j != pos && rng.random_bool(0.4)).collect()
                };
                margins.push(negs.iter().map(|_| rng.random_range(-2.0..2.0)).collect());
                batch.negatives.push(negs);
            }
            let model = match mode {
                TrainMode::FreeDsi => {
                    let ids = (0..n_docs).map(|i| format!("d{i}")).collect();
                    Model::free(encoder, FreeEmbeddingTable::random(ids, dim, rng.random())?)
                }
                TrainMode::TiedMarginMse => {
                    batch.teacher_margins = Some(margins);
                    Model::tied(encoder)
                }
                TrainMode::TiedContrastive => Model::tied(encoder),
            };
            let config = TrainConfig {
                mode,
                temperature: rng.random_range(0.3..2.0),
                ..TrainConfig::default()
            };
            let worst = max_gradient_error(&model, &docs, &batch, &config)?;
            if !(worst < 1e-4) {
                return Ok(Some(format!("{mode}: relative error {worst:e}")));
            }
        }
        Ok(None)
    })
}

fn max_gradient_error(model: &Model, docs: &[crate::encoder::FeatureVector], batch: &TrainBatch, config: &TrainConfig) -> Result<f64> {
    const STEP: f64 = 1e-4;
    let grads = compute_gradients(model, docs, batch, config)?;
    let loss_at = |m: &Model| compute_gradients(m, docs, batch, config).map(|g| g.loss);
    let rel = |a: f64, b: f64| (a - b).abs() / 1f64.max(a.abs()).max(b.abs());
    let mut worst = 0f64;
    let mut probe = |get: &dyn Fn(&mut Model) -> &mut f64, analytic: f64| -> Result<()> {
        let mut plus = model.clone();
        *get(&mut plus) += STEP;
        let mut minus = model.clone();
        *get(&mut minus) -= STEP;
        let fd = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * STEP);
        worst = worst.max(rel(fd, analytic));
        Ok(())
    };
    for i in 0..model.encoder.weight.len() {
        probe(&|m: &mut Model| &mut m.encoder.weight[i], grads.weight[i])?;
    }
    for i in 0..model.encoder.bias.len() {
        probe(&|m: &mut Model| &mut m.encoder.bias[i], grads.bias[i])?;
    }
    if let (Some(table), Some(g)) = (&model.table, &grads.table) {
        for i in 0..table.rows.len() {
            probe(&|m: &mut Model| &mut m.table.as_mut().unwrap().rows[i], g[i])?;
        }
    }
    Ok(worst)
}

/// Scores every document term by term straight from the formula and sorts,
/// then compares with the inverted-index search.
pub fn check_bm25_brute_force(instances: usize, seed: u64) -> CheckReport {
    run_check("bm25 == brute force", instances, seed, |rng| {
        let n = rng.random_range(1..=300);
        let vocab = rng.random_range(2..=60);
        let word = |rng: &mut ChaCha8Rng| format!("w{}", rng.random_range(0..vocab));
        let docs = (0..n)
            .map(|i| {
                let len = rng.random_range(1..12);
                let text: Vec<String> = (0..len).map(|_| word(rng)).collect();
                Document::new(format!("d{i}"), text.join(" "))
            })
            .collect();
        let corpus = Collection::new(docs)?;
        let query: Vec<String> = (0..rng.random_range(1..5)).map(|_| word(rng)).collect();
        let query = query.join(" ");
        for params in [Bm25Params::DEFAULT, Bm25Params::NQ_TUNED] {
            let index = build_bm25(&corpus, params)?;
            let got = bm25_search(&index, &query, n)?;
            let expected = brute_force(&corpus, &query, params);
            let same = got.hits.len() == expected.len()
                && got.hits.iter().zip(&expected).all(|(h, &(s, i))| h.index == i && h.score == s);
            if !same {
                return Ok(Some(format!("n={n} query={query:?} k1={}", params.k1)));
            }
        }
        Ok(None)
    })
}

fn brute_force(corpus: &Collection, query: &str, params: Bm25Params) -> Vec<(f64, usize)> {
    let docs: Vec<Vec<String>> = corpus.iter().map(|d| tokenize(&d.full_text())).collect();
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / docs.len() as f64;
    let mut scored = Vec::new();
    for (i, doc) in docs.iter().enumerate() {
        let mut score = 0.0;
        for term in tokenize(query) {
            let tf = doc.iter().filter(|t| **t == term).count();
            if tf == 0 {
                continue;
            }
            let df = docs.iter().filter(|d| d.contains(&term)).count();
            let tf = tf as f64;
            let w = idf(docs.len(), df);
            score += w * (tf * (params.k1 + 1.0)) / (tf + params.k1 * (1.0 - params.b + params.b * doc.len() as f64 / avgdl));
        }
        if score > 0.0 {
            scored.push((score, i));
        }
    }
    scored.sort_by(|a, b| rank_cmp(*a, *b));
    scored
}

/// Runs every check with its default instance count.
pub fn run_all(seed: u64) -> Vec<CheckReport> {
    vec![
        check_atomic_flat(100, seed),
        check_greedy_nprobe1(100, seed),
        check_dense_equivalent_beam(100, seed),
        check_leaf_normalization(50, seed),
        check_tree_validity(100, seed),
        check_gradients(20, seed),
        check_bm25_brute_force(50, seed),
    ]
}
