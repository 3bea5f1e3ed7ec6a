//! Seeded synthetic retrieval tasks.
//!
//! Documents are random token sets drawn from a Zipf-distributed vocabulary.
//! Each query is a noisy subset of one document's tokens: a few tokens are
//! sampled from the document and each is replaced, with some probability,
//! by a token drawn from the same Zipf distribution, so noise is mostly
//! frequent, uninformative words. Kept tokens may also be rewritten to a
//! fixed alias that never occurs in documents, which lexical matching cannot
//! recover but a trained encoder can.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Collection, Document, Qrels, Query};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub n_train_queries: usize,
    pub n_test_queries: usize,
    pub vocab_size: usize,
    pub zipf_exponent: f64,
    pub doc_length: usize,
    pub query_length: usize,
    /// Probability that a query token is replaced by a Zipf-drawn one.
    pub noise: f64,
    /// Probability that a kept document token appears in the query under
    /// its fixed alias, a distinct surface form no document uses.
    pub alias: f64,
    /// Held-out queries target documents that also have a training query
    /// (new queries for indexed documents) instead of unseen documents.
    pub held_out_seen_docs: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 2000,
            n_train_queries: 500,
            n_test_queries: 100,
            vocab_size: 2000,
            zipf_exponent: 1.0,
            doc_length: 20,
            query_length: 5,
            noise: 0.2,
            alias: 0.8,
            held_out_seen_docs: true,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthTask {
    pub corpus: Collection,
    pub train_queries: Vec<Query>,
    pub train_qrels: Qrels,
    pub test_queries: Vec<Query>,
    pub test_qrels: Qrels,
}

impl SynthTask {
    pub fn train_pairs(&self) -> Vec<(String, String)> {
        self.train_qrels.positive_pairs()
    }
}

fn token(i: usize) -> String {
    format!("t{i}")
}

fn alias(i: usize) -> String {
    format!("a{i}")
}

struct Zipf {
    cdf: Vec<f64>,
}

impl Zipf {
    fn new(n: usize, s: f64) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = (1..=n)
            .map(|r| {
                acc += (r as f64).powf(-s);
                acc
            })
            .collect();
        for c in &mut cdf {
            *c /= acc;
        }
        Zipf { cdf }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1)
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthTask> {
    let n_queries = config.n_train_queries + config.n_test_queries;
    if n_queries > config.n_docs {
        return Err(Error::arg("more queries than documents"));
    }
    if config.doc_length == 0 || config.doc_length > config.vocab_size / 2 {
        return Err(Error::arg("doc length must be in [1, vocab/2]"));
    }
    if config.query_length == 0 || config.query_length > config.doc_length {
        return Err(Error::arg("query length must be in [1, doc length]"));
    }
    if !(0.0..=1.0).contains(&config.noise) || !(0.0..=1.0).contains(&config.alias) {
        return Err(Error::arg("noise and alias rates must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let zipf = Zipf::new(config.vocab_size, config.zipf_exponent);

    let mut doc_tokens: Vec<Vec<usize>> = Vec::with_capacity(config.n_docs);
    for _ in 0..config.n_docs {
        let mut toks: Vec<usize> = Vec::with_capacity(config.doc_length);
        while toks.len() < config.doc_length {
            let t = zipf.draw(&mut rng);
            if !toks.contains(&t) {
                toks.push(t);
            }
        }
        doc_tokens.push(toks);
    }
    let docs = doc_tokens
        .iter()
        .enumerate()
        .map(|(i, toks)| {
            let text = toks.iter().map(|&t| token(t)).collect::<Vec<_>>().join(" ");
            Document::new(format!("doc{i}"), text)
        })
        .collect();
    let corpus = Collection::new(docs)?;

    let mut targets = sample(&mut rng, config.n_docs, config.n_train_queries).into_vec();
    if config.held_out_seen_docs {
        for i in sample(&mut rng, config.n_train_queries, config.n_test_queries) {
            targets.push(targets[i]);
        }
    } else {
        let taken: std::collections::HashSet<usize> = targets.iter().copied().collect();
        let rest: Vec<usize> = (0..config.n_docs).filter(|d| !taken.contains(d)).collect();
        for i in sample(&mut rng, rest.len(), config.n_test_queries) {
            targets.push(rest[i]);
        }
    }
    let mut train_queries = Vec::new();
    let mut test_queries = Vec::new();
    let mut train_qrels = Qrels::new();
    let mut test_qrels = Qrels::new();
    for (qi, &d) in targets.iter().enumerate() {
        let picks = sample(&mut rng, config.doc_length, config.query_length).into_vec();
        let words: Vec<String> = picks
            .into_iter()
            .map(|p| {
                if rng.random::<f64>() < config.noise {
                    token(zipf.draw(&mut rng))
                } else if rng.random::<f64>() < config.alias {
                    alias(doc_tokens[d][p])
                } else {
                    token(doc_tokens[d][p])
                }
            })
            .collect();
        let query_id = format!("q{qi}");
        let q = Query {
            query_id: query_id.clone(),
            text: words.join(" "),
        };
        let doc_id = format!("doc{d}");
        if qi < config.n_train_queries {
            train_qrels.insert(&query_id, &doc_id, 1)?;
            train_queries.push(q);
        } else {
            test_qrels.insert(&query_id, &doc_id, 1)?;
            test_queries.push(q);
        }
    }
    Ok(SynthTask {
        corpus,
        train_queries,
        train_qrels,
        test_queries,
        test_qrels,
    })
}
