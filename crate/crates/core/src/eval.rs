//! Recall@k and MRR@k over TREC runs.
//!
//! A query is evaluated when the qrels list at least one document with grade
//! > 0 for it. Evaluated queries missing from the run score 0. Run queries
//! without judgments are ignored.

use std::fmt;
use std::fmt::Write as _;

use crate::corpus::{Qrels, RunFile};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Recall,
    Mrr,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Recall => "recall",
            Metric::Mrr => "mrr",
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "recall" | "r" => Ok(Metric::Recall),
            "mrr" => Ok(Metric::Mrr),
            other => Err(Error::arg(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: Metric,
    pub k: usize,
    /// Per evaluated query, in ascending query-id order.
    pub per_query: Vec<(String, f64)>,
    pub mean: f64,
}

impl MetricReport {
    pub fn n_queries(&self) -> usize {
        self.per_query.len()
    }

    /// `metric TAB k TAB mean TAB n_queries`
    pub fn summary_line(&self) -> String {
        format!("{}\t{}\t{:.6}\t{}", self.metric, self.k, self.mean, self.n_queries())
    }

    pub fn per_query_lines(&self) -> String {
        let mut out = String::new();
        for (q, v) in &self.per_query {
            let _ = writeln!(out, "{}\t{}\t{q}\t{v:.6}", self.metric, self.k);
        }
        out
    }
}

fn evaluate(
    run: &RunFile,
    qrels: &Qrels,
    k: usize,
    metric: Metric,
    per_query: impl Fn(&[&str], &[String]) -> f64,
) -> Result<MetricReport> {
    if k < 1 {
        return Err(Error::arg("k must be >= 1"));
    }
    let mut values = Vec::new();
    for qid in qrels.queries() {
        let relevant = qrels.relevant(qid);
        if relevant.is_empty() {
            continue;
        }
        let top: Vec<String> = run
            .get(qid)
            .map(|q| q.entries.iter().take(k).map(|e| e.doc_id.clone()).collect())
            .unwrap_or_default();
        values.push((qid.to_string(), per_query(&relevant, &top)));
    }
    let mean = if values.is_empty() {
        0.0
    } else {
        values.iter().map(|(_, v)| v).sum::<f64>() / values.len() as f64
    };
    Ok(MetricReport {
        metric,
        k,
        per_query: values,
        mean,
    })
}

pub fn recall_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    evaluate(run, qrels, k, Metric::Recall, |relevant, top| {
        let hits = relevant.iter().filter(|r| top.iter().any(|d| d == *r)).count();
        hits as f64 / relevant.len() as f64
    })
}

pub fn mrr_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    evaluate(run, qrels, k, Metric::Mrr, |relevant, top| {
        top.iter()
            .position(|d| relevant.contains(&d.as_str()))
            .map_or(0.0, |i| 1.0 / (i + 1) as f64)
    })
}

pub fn evaluate_metric(run: &RunFile, qrels: &Qrels, metric: Metric, k: usize) -> Result<MetricReport> {
    match metric {
        Metric::Recall => recall_at_k(run, qrels, k),
        Metric::Mrr => mrr_at_k(run, qrels, k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run_of(lists: &[(&str, &[&str])]) -> RunFile {
        let mut run = RunFile::new("t");
        for (q, docs) in lists {
            let n = docs.len();
            run.push_ranked(*q, docs.iter().enumerate().map(|(i, d)| (*d, (n - i) as f64)));
        }
        run
    }

    fn qrels_of(pairs: &[(&str, &str, u32)]) -> Qrels {
        let mut q = Qrels::new();
        for (a, b, g) in pairs {
            q.insert(a, b, *g).unwrap();
        }
        q
    }

    #[test]
    fn recall_definition() {
        let run = run_of(&[("q1", &["a", "b", "rel"])]);
        let qrels = qrels_of(&[("q1", "rel", 1)]);
        assert_eq!(recall_at_k(&run, &qrels, 10).unwrap().mean, 1.0);
        assert_eq!(recall_at_k(&run, &qrels, 2).unwrap().mean, 0.0);

        let qrels = qrels_of(&[("q1", "rel", 1), ("q1", "zzz", 2)]);
        assert_eq!(recall_at_k(&run, &qrels, 10).unwrap().mean, 0.5);
        assert!(recall_at_k(&run, &qrels, 0).is_err());
    }

    #[test]
    fn missing_query_scores_zero_and_counts() {
        let run = run_of(&[("q1", &["a"])]);
        let qrels = qrels_of(&[("q1", "a", 1), ("q2", "b", 1), ("q3", "c", 0)]);
        let r = recall_at_k(&run, &qrels, 5).unwrap();
        assert_eq!(r.n_queries(), 2);
        assert_eq!(r.mean, 0.5);
    }

    #[test]
    fn mrr_definition() {
        let qrels = qrels_of(&[("q1", "rel", 1)]);
        let at = |pos: usize, k: usize| {
            let mut docs: Vec<String> = (0..12).map(|i| format!("x{i}")).collect();
            docs[pos - 1] = "rel".into();
            let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
            mrr_at_k(&run_of(&[("q1", &refs)]), &qrels, k).unwrap().mean
        };
        assert_eq!(at(1, 10), 1.0);
        assert_eq!(at(4, 10), 0.25);
        assert_eq!(at(11, 10), 0.0);
    }

    #[test]
    fn report_line() {
        let run = run_of(&[("q1", &["a"])]);
        let qrels = qrels_of(&[("q1", "a", 1)]);
        assert_eq!(mrr_at_k(&run, &qrels, 10).unwrap().summary_line(), "mrr\t10\t1.000000\t1");
    }

    proptest! {
        #[test]
        fn bounded_and_monotone_in_k(
            ranked in proptest::collection::vec(proptest::collection::vec(0u8..20, 0..15), 1..8),
            rel in proptest::collection::vec(proptest::collection::btree_set(0u8..20, 1..4), 1..8),
        ) {
            let mut run = RunFile::new("t");
            for (qi, docs) in ranked.iter().enumerate() {
                let mut seen = std::collections::BTreeSet::new();
                let uniq: Vec<String> = docs.iter().filter(|d| seen.insert(**d)).map(|d| format!("d{d}")).collect();
                let n = uniq.len();
                run.push_ranked(format!("q{qi}"), uniq.into_iter().enumerate().map(|(i, d)| (d, (n - i) as f64)));
            }
            let mut qrels = Qrels::new();
            for (qi, set) in rel.iter().enumerate() {
                for d in set {
                    qrels.insert(&format!("q{qi}"), &format!("d{d}"), 1).unwrap();
                }
            }
            let mut prev = (0.0, 0.0);
            for k in 1..20 {
                let r = recall_at_k(&run, &qrels, k).unwrap();
                let m = mrr_at_k(&run, &qrels, k).unwrap();
                prop_assert!((0.0..=1.0).contains(&r.mean) && (0.0..=1.0).contains(&m.mean));
                prop_assert!(r.mean >= prev.0 && m.mean >= prev.1);
                prev = (r.mean, m.mean);
            }
            // query order in the run does not matter
            let mut reversed = run.clone();
            reversed.queries.reverse();
            prop_assert_eq!(mrr_at_k(&run, &qrels, 5).unwrap().mean, mrr_at_k(&reversed, &qrels, 5).unwrap().mean);
        }

        #[test]
        fn oracle_run_scores_one(n in 1usize..10, k in 1usize..5) {
            let mut run = RunFile::new("t");
            let mut qrels = Qrels::new();
            for i in 0..n {
                run.push_ranked(format!("q{i}"), [(format!("rel{i}"), 1.0), (format!("x{i}"), 0.5)]);
                qrels.insert(&format!("q{i}"), &format!("rel{i}"), 1).unwrap();
            }
            prop_assert_eq!(recall_at_k(&run, &qrels, k).unwrap().mean, 1.0);
            prop_assert_eq!(mrr_at_k(&run, &qrels, k).unwrap().mean, 1.0);
        }
    }
}
