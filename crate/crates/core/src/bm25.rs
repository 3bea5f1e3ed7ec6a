//! BM25 over an in-memory inverted index, plus hard-negative mining.
//!
//! score(q, d) = Σ_{t ∈ q} idf(t) · tf·(k1+1) / (tf + k1·(1 − b + b·|d|/avgdl))
//! idf(t)      = ln(1 + (N − df + 0.5) / (df + 0.5))
//!
//! Repeated query terms contribute once per occurrence. Tokenization is the
//! encoder's, so lexical and dense pipelines see the same tokens.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::{write_file, Collection, Qrels, Query};
use crate::dense::{top_k, RankedList};
use crate::encoder::tokenize;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Bm25Params {
    pub const DEFAULT: Bm25Params = Bm25Params { k1: 0.9, b: 0.4 };
    /// Parameters tuned for NQ320k.
    pub const NQ_TUNED: Bm25Params = Bm25Params { k1: 10.0, b: 0.8 };

    pub fn new(k1: f64, b: f64) -> Result<Self> {
        if !(k1 >= 0.0 && k1.is_finite()) || !(0.0..=1.0).contains(&b) {
            return Err(Error::arg(format!("invalid BM25 parameters k1={k1}, b={b}")));
        }
        Ok(Bm25Params { k1, b })
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::DEFAULT),
            "nq-tuned" | "nq" => Ok(Self::NQ_TUNED),
            other => Err(Error::arg(format!("unknown BM25 preset {other:?}"))),
        }
    }
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    postings: HashMap<String, Vec<(u32, u32)>>,
    doc_lengths: Vec<u32>,
    avgdl: f64,
    ids: Vec<String>,
    params: Bm25Params,
}

pub fn idf(n_docs: usize, df: usize) -> f64 {
    let n = n_docs as f64;
    let df = df as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

pub fn build_bm25(corpus: &Collection, params: Bm25Params) -> Result<Bm25Index> {
    if corpus.is_empty() {
        return Err(Error::arg("cannot index an empty corpus"));
    }
    let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
    let mut doc_lengths = Vec::with_capacity(corpus.len());
    for (ordinal, doc) in corpus.iter().enumerate() {
        let tokens = tokenize(&doc.full_text());
        doc_lengths.push(tokens.len() as u32);
        let mut tf: HashMap<String, u32> = HashMap::new();
        for t in tokens {
            *tf.entry(t).or_default() += 1;
        }
        for (t, c) in tf {
            postings.entry(t).or_default().push((ordinal as u32, c));
        }
    }
    let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
    let avgdl = total as f64 / doc_lengths.len() as f64;
    Ok(Bm25Index {
        postings,
        doc_lengths,
        avgdl,
        ids: corpus.iter().map(|d| d.doc_id.clone()).collect(),
        params,
    })
}

impl Bm25Index {
    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_lengths.is_empty()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_length(&self, ordinal: usize) -> u32 {
        self.doc_lengths[ordinal]
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// Postings sorted by doc ordinal.
    pub fn postings(&self, term: &str) -> &[(u32, u32)] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    fn term_score(&self, idf: f64, tf: u32, dl: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * dl as f64 / self.avgdl))
    }

    /// Accumulated BM25 score for every document.
    pub fn score_all(&self, query: &str) -> Vec<f64> {
        let mut scores = vec![0.0f64; self.len()];
        for term in tokenize(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let w = idf(self.len(), list.len());
            for &(doc, tf) in list {
                let doc = doc as usize;
                scores[doc] += self.term_score(w, tf, self.doc_lengths[doc]);
            }
        }
        scores
    }
}

pub fn bm25_search(index: &Bm25Index, query: &str, k: usize) -> Result<RankedList> {
    if k < 1 {
        return Err(Error::arg("k must be >= 1"));
    }
    let scored = index
        .score_all(query)
        .into_iter()
        .enumerate()
        .filter(|(_, s)| *s > 0.0)
        .map(|(i, s)| (s, i))
        .collect();
    Ok(RankedList::from_scored(top_k(scored, k), &index.ids))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Negative {
    pub doc_id: String,
    /// 1-based rank in the BM25 result list, before positives were removed.
    pub rank: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MinedNegatives {
    /// Query id and its negatives, in query input order.
    pub per_query: Vec<(String, Vec<Negative>)>,
    /// Queries without judgments; no negatives were mined for them.
    pub skipped: Vec<String>,
}

impl MinedNegatives {
    pub fn get(&self, query_id: &str) -> Option<&[Negative]> {
        self.per_query
            .iter()
            .find(|(q, _)| q == query_id)
            .map(|(_, n)| n.as_slice())
    }

    pub fn as_map(&self) -> HashMap<String, Vec<String>> {
        self.per_query
            .iter()
            .map(|(q, negs)| (q.clone(), negs.iter().map(|n| n.doc_id.clone()).collect()))
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (q, negs) in &self.per_query {
            for n in negs {
                let _ = writeln!(out, "{q}\t{}\t{}\t{}", n.doc_id, n.rank, n.score);
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_tsv().as_bytes())
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut out = MinedNegatives::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [q, doc_id, rank, score] = cols[..] else {
                return Err(Error::format_at(i + 1, "expected query_id, doc_id, rank, score"));
            };
            let rank = rank
                .parse()
                .map_err(|_| Error::format_at(i + 1, format!("bad rank {rank:?}")))?;
            let score = score
                .parse()
                .map_err(|_| Error::format_at(i + 1, format!("bad score {score:?}")))?;
            let neg = Negative {
                doc_id: doc_id.to_string(),
                rank,
                score,
            };
            match out.per_query.last_mut() {
                Some((last, negs)) if last == q => negs.push(neg),
                _ => out.per_query.push((q.to_string(), vec![neg])),
            }
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text)
    }
}

/// Top-`top_k` BM25 hits per query with judged positives removed, truncated
/// to `per_query`.
pub fn mine_negatives(
    index: &Bm25Index,
    queries: &[Query],
    qrels: &Qrels,
    top_k: usize,
    per_query: usize,
) -> Result<MinedNegatives> {
    if per_query > top_k {
        return Err(Error::arg(format!(
            "per_query ({per_query}) must not exceed top_k ({top_k})"
        )));
    }
    let mut out = MinedNegatives::default();
    for q in queries {
        if !qrels.contains_query(&q.query_id) {
            log::warn!("query {} has no judgments; skipping negative mining", q.query_id);
            out.skipped.push(q.query_id.clone());
            continue;
        }
        let mut negs = Vec::new();
        if per_query > 0 {
            let hits = bm25_search(index, &q.text, top_k)?;
            negs = hits
                .iter()
                .enumerate()
                .filter(|(_, h)| !qrels.is_relevant(&q.query_id, &h.doc_id))
                .take(per_query)
                .map(|(r, h)| Negative {
                    doc_id: h.doc_id.clone(),
                    rank: r + 1,
                    score: h.score,
                })
                .collect();
        }
        out.per_query.push((q.query_id.clone(), negs));
    }
    Ok(out)
}
