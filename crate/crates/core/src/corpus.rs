//! Corpora, queries, relevance judgments, embedding matrices and run files.
//!
//! Text formats follow the usual IR conventions (JSON lines for documents,
//! TREC columns for qrels and runs). Embedding matrices use a small
//! little-endian binary container:
//!
//! ```text
//! "GRDE" | version: u32 = 1 | dim: u32 | count: u64
//! count × (len: u32, utf-8 id bytes)
//! count × dim × f32, row-major
//! ```
//!
//! Every loader is all-or-nothing: the first malformed record aborts the load.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

pub(crate) const MAGIC: &[u8; 4] = b"GRDE";
pub(crate) const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub title: Option<String>,
    pub text: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            doc_id: doc_id.into(),
            title: None,
            text: text.into(),
        }
    }

    /// Title and body joined the way every indexer in the crate sees them.
    pub fn full_text(&self) -> String {
        match &self.title {
            Some(title) if !title.is_empty() => format!("{title} {}", self.text),
            _ => self.text.clone(),
        }
    }
}

/// An ordered document collection with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Collection {
    docs: Vec<Document>,
    positions: HashMap<String, usize>,
}

impl Collection {
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut positions = HashMap::with_capacity(docs.len());
        for (i, doc) in docs.iter().enumerate() {
            check_document(doc).map_err(|m| Error::format_at(i + 1, m))?;
            if positions.insert(doc.doc_id.clone(), i).is_some() {
                return Err(Error::format_at(
                    i + 1,
                    format!("duplicate doc_id {:?}", doc.doc_id),
                ));
            }
        }
        Ok(Collection { docs, positions })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, i: usize) -> Option<&Document> {
        self.docs.get(i)
    }

    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.positions.get(doc_id).copied()
    }

    pub fn by_id(&self, doc_id: &str) -> Option<&Document> {
        self.position(doc_id).map(|i| &self.docs[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.docs.iter()
    }
}

fn check_document(doc: &Document) -> std::result::Result<(), String> {
    if doc.doc_id.is_empty() {
        return Err("empty doc_id".into());
    }
    if doc.text.is_empty() {
        return Err(format!("document {:?} has empty text", doc.doc_id));
    }
    Ok(())
}

#[derive(Deserialize)]
struct DocumentRecord {
    doc_id: String,
    #[serde(default)]
    title: Option<String>,
    text: String,
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Collection> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&bytes)
}

/// Parses JSON-lines documents. Blank lines are skipped; line numbers in
/// errors count them.
pub fn parse_corpus(bytes: &[u8]) -> Result<Collection> {
    let mut docs = Vec::new();
    let mut positions = HashMap::new();
    for (i, raw) in split_lines(bytes).enumerate() {
        let line_no = i + 1;
        let line = std::str::from_utf8(raw)
            .map_err(|e| Error::format_at(line_no, format!("invalid UTF-8: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DocumentRecord = serde_json::from_str(line)
            .map_err(|e| Error::format_at(line_no, format!("bad document record: {e}")))?;
        let doc = Document {
            doc_id: record.doc_id,
            title: record.title,
            text: record.text,
        };
        check_document(&doc).map_err(|m| Error::format_at(line_no, m))?;
        if positions.insert(doc.doc_id.clone(), docs.len()).is_some() {
            return Err(Error::format_at(
                line_no,
                format!("duplicate doc_id {:?}", doc.doc_id),
            ));
        }
        docs.push(doc);
    }
    Ok(Collection { docs, positions })
}

pub fn write_corpus(collection: &Collection, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for doc in collection.iter() {
        let mut obj = serde_json::Map::new();
        obj.insert("doc_id".into(), doc.doc_id.clone().into());
        if let Some(title) = &doc.title {
            obj.insert("title".into(), title.clone().into());
        }
        obj.insert("text".into(), doc.text.clone().into());
        out.push_str(&serde_json::Value::Object(obj).to_string());
        out.push('\n');
    }
    write_file(path.as_ref(), out.as_bytes())
}

fn split_lines(bytes: &[u8]) -> impl Iterator<Item = &[u8]> {
    let trimmed = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    let empty = bytes.is_empty();
    trimmed
        .split(|&b| b == b'\n')
        .filter(move |_| !empty)
        .map(|l| l.strip_suffix(b"\r").unwrap_or(l))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub query_id: String,
    pub text: String,
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_queries(&bytes)
}

/// Parses `query_id TAB text` lines.
pub fn parse_queries(bytes: &[u8]) -> Result<Vec<Query>> {
    let mut queries = Vec::new();
    let mut seen = HashMap::new();
    for (i, raw) in split_lines(bytes).enumerate() {
        let line_no = i + 1;
        let line = std::str::from_utf8(raw)
            .map_err(|e| Error::format_at(line_no, format!("invalid UTF-8: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::format_at(line_no, "expected query_id<TAB>text"))?;
        if id.is_empty() || text.trim().is_empty() {
            return Err(Error::format_at(line_no, "empty query id or text"));
        }
        if seen.insert(id.to_string(), line_no).is_some() {
            return Err(Error::format_at(line_no, format!("duplicate query_id {id:?}")));
        }
        queries.push(Query {
            query_id: id.to_string(),
            text: text.to_string(),
        });
    }
    Ok(queries)
}

pub fn write_queries(queries: &[Query], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for q in queries {
        let _ = writeln!(out, "{}\t{}", q.query_id, q.text);
    }
    write_file(path.as_ref(), out.as_bytes())
}

/// Graded relevance judgments: query id → doc id → grade.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a judgment; a repeated (query, doc) pair is rejected.
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) -> Result<()> {
        let docs = self.judgments.entry(query_id.to_string()).or_default();
        if docs.insert(doc_id.to_string(), grade).is_some() {
            return Err(Error::arg(format!(
                "repeated judgment for ({query_id}, {doc_id})"
            )));
        }
        Ok(())
    }

    pub fn get(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn contains_query(&self, query_id: &str) -> bool {
        self.judgments.contains_key(query_id)
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> Option<u32> {
        self.judgments.get(query_id)?.get(doc_id).copied()
    }

    pub fn is_relevant(&self, query_id: &str, doc_id: &str) -> bool {
        self.grade(query_id, doc_id).is_some_and(|g| g > 0)
    }

    /// Doc ids with grade > 0, in ascending id order.
    pub fn relevant(&self, query_id: &str) -> Vec<&str> {
        self.judgments
            .get(query_id)
            .map(|docs| {
                docs.iter()
                    .filter(|(_, &g)| g > 0)
                    .map(|(d, _)| d.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    /// (query, doc) pairs with grade > 0, query-major ascending.
    pub fn positive_pairs(&self) -> Vec<(String, String)> {
        self.judgments
            .iter()
            .flat_map(|(q, docs)| {
                docs.iter()
                    .filter(|(_, &g)| g > 0)
                    .map(move |(d, _)| (q.clone(), d.clone()))
            })
            .collect()
    }
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_qrels(&bytes)
}

/// Parses `qid 0 docid grade` lines.
pub fn parse_qrels(bytes: &[u8]) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (i, raw) in split_lines(bytes).enumerate() {
        let line_no = i + 1;
        let line = std::str::from_utf8(raw)
            .map_err(|e| Error::format_at(line_no, format!("invalid UTF-8: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let [qid, _iter, doc_id, grade] = cols[..] else {
            return Err(Error::format_at(
                line_no,
                format!("expected 4 columns, found {}", cols.len()),
            ));
        };
        let grade: u32 = grade
            .parse()
            .map_err(|_| Error::format_at(line_no, format!("grade {grade:?} is not a non-negative integer")))?;
        qrels.insert(qid, doc_id, grade).map_err(|_| {
            Error::format_at(line_no, format!("repeated judgment for ({qid}, {doc_id})"))
        })?;
    }
    Ok(qrels)
}

pub fn write_qrels(qrels: &Qrels, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for (q, docs) in &qrels.judgments {
        for (d, g) in docs {
            let _ = writeln!(out, "{q} 0 {d} {g}");
        }
    }
    write_file(path.as_ref(), out.as_bytes())
}

/// Row-major dense vectors aligned with a list of document ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, ids: Vec<String>, rows: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("embedding dimension must be positive"));
        }
        if rows.len() != ids.len() * dim {
            return Err(Error::arg(format!(
                "{} ids with dim {dim} need {} values, got {}",
                ids.len(),
                ids.len() * dim,
                rows.len()
            )));
        }
        let mut seen = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if seen.insert(id.as_str(), i).is_some() {
                return Err(Error::arg(format!("duplicate id {id:?}")));
            }
        }
        if let Some(p) = rows.iter().position(|v| !v.is_finite()) {
            return Err(Error::arg(format!(
                "non-finite value in row {} ({})",
                p / dim,
                ids[p / dim]
            )));
        }
        Ok(EmbeddingMatrix { dim, ids, rows })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::arg("rows have differing lengths"));
        }
        Self::new(dim, ids, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.rows.chunks_exact(self.dim)
    }

    pub fn values(&self) -> &[f32] {
        &self.rows
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let id_bytes: usize = self.ids.iter().map(|s| 4 + s.len()).sum();
        let mut out = Vec::with_capacity(20 + id_bytes + 4 * self.rows.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic()?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::format("dimension is zero"));
        }
        let count = usize::try_from(r.u64()?).map_err(|_| Error::format("count overflows"))?;
        // Each id needs at least its 4-byte length prefix.
        if count > r.remaining() / 4 {
            return Err(Error::format("truncated payload"));
        }
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let raw = r.take(len)?;
            let id = std::str::from_utf8(raw)
                .map_err(|_| Error::format("id is not valid UTF-8"))?;
            ids.push(id.to_string());
        }
        let n_values = count
            .checked_mul(dim)
            .ok_or_else(|| Error::format("payload size overflows"))?;
        if r.remaining() != n_values * 4 {
            return Err(Error::format(format!(
                "expected {} payload bytes, found {}",
                n_values * 4,
                r.remaining()
            )));
        }
        let rows = (0..n_values).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        EmbeddingMatrix::new(dim, ids, rows).map_err(|e| Error::format(e.to_string()))
    }
}

pub fn save_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    if matrix.dim == 0 {
        return Err(Error::arg("cannot save a matrix with dim 0"));
    }
    write_file(path.as_ref(), &matrix.to_bytes())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingMatrix::from_bytes(&bytes)
}

/// Little-endian cursor shared by the binary containers.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format("truncated payload"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn expect_magic(&mut self) -> Result<()> {
        let magic = self.take(4).map_err(|_| Error::format("missing magic bytes"))?;
        if magic != MAGIC {
            return Err(Error::format("bad magic bytes"));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub doc_id: String,
    pub rank: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRun {
    pub query_id: String,
    pub entries: Vec<RunEntry>,
}

/// A ranked result list per query, in query insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunFile {
    pub tag: String,
    pub queries: Vec<QueryRun>,
}

impl RunFile {
    pub fn new(tag: impl Into<String>) -> Self {
        RunFile {
            tag: tag.into(),
            queries: Vec::new(),
        }
    }

    /// Appends a query; ranks are assigned 1.. in the given order.
    pub fn push_ranked<I, S>(&mut self, query_id: impl Into<String>, ranked: I)
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let entries = ranked
            .into_iter()
            .enumerate()
            .map(|(i, (doc_id, score))| RunEntry {
                doc_id: doc_id.into(),
                rank: i + 1,
                score,
            })
            .collect();
        self.queries.push(QueryRun {
            query_id: query_id.into(),
            entries,
        });
    }

    pub fn get(&self, query_id: &str) -> Option<&QueryRun> {
        self.queries.iter().find(|q| q.query_id == query_id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tag.is_empty() || self.tag.chars().any(char::is_whitespace) {
            return Err(Error::arg(format!("run tag {:?} must be one non-empty word", self.tag)));
        }
        for q in &self.queries {
            if q.query_id.is_empty() || q.query_id.chars().any(char::is_whitespace) {
                return Err(Error::arg(format!("bad query id {:?}", q.query_id)));
            }
            for (i, e) in q.entries.iter().enumerate() {
                if e.rank != i + 1 {
                    return Err(Error::arg(format!(
                        "query {}: expected rank {}, found {}",
                        q.query_id,
                        i + 1,
                        e.rank
                    )));
                }
                if !e.score.is_finite() {
                    return Err(Error::arg(format!("query {}: non-finite score", q.query_id)));
                }
                if i > 0 && e.score > q.entries[i - 1].score {
                    return Err(Error::arg(format!(
                        "query {}: score increases at rank {}",
                        q.query_id, e.rank
                    )));
                }
                if e.doc_id.is_empty() || e.doc_id.chars().any(char::is_whitespace) {
                    return Err(Error::arg(format!("bad doc id {:?}", e.doc_id)));
                }
            }
        }
        Ok(())
    }

    /// Renders the TREC six-column form. Fails before producing output if
    /// the run is invalid.
    pub fn to_trec(&self) -> Result<String> {
        self.validate()?;
        let mut out = String::new();
        for q in &self.queries {
            for e in &q.entries {
                let _ = writeln!(
                    out,
                    "{} Q0 {} {} {} {}",
                    q.query_id,
                    e.doc_id,
                    e.rank,
                    format_score(e.score),
                    self.tag
                );
            }
        }
        Ok(out)
    }
}

/// Formats a score rounded to 6 significant digits; integral values keep a
/// trailing `.0`.
pub fn format_score(score: f64) -> String {
    let rounded: f64 = format!("{score:.5e}").parse().unwrap_or(score);
    let mut s = rounded.to_string();
    if !s.contains(['.', 'e', 'n', 'N']) {
        s.push_str(".0");
    }
    s
}

pub fn write_run(run: &RunFile, path: impl AsRef<Path>) -> Result<()> {
    let text = run.to_trec()?;
    write_file(path.as_ref(), text.as_bytes())
}

pub fn load_run(path: impl AsRef<Path>) -> Result<RunFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_run(&bytes)
}

/// Parses a TREC run. Queries keep first-appearance order; entries within a
/// query are re-sorted by rank.
pub fn parse_run(bytes: &[u8]) -> Result<RunFile> {
    let mut run = RunFile::default();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for (i, raw) in split_lines(bytes).enumerate() {
        let line_no = i + 1;
        let line = std::str::from_utf8(raw)
            .map_err(|e| Error::format_at(line_no, format!("invalid UTF-8: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let [qid, _q0, doc_id, rank, score, tag] = cols[..] else {
            return Err(Error::format_at(
                line_no,
                format!("expected 6 columns, found {}", cols.len()),
            ));
        };
        let rank: usize = rank
            .parse()
            .map_err(|_| Error::format_at(line_no, format!("bad rank {rank:?}")))?;
        let score: f64 = score
            .parse()
            .map_err(|_| Error::format_at(line_no, format!("bad score {score:?}")))?;
        if run.tag.is_empty() {
            run.tag = tag.to_string();
        }
        let idx = *slot.entry(qid.to_string()).or_insert_with(|| {
            run.queries.push(QueryRun {
                query_id: qid.to_string(),
                entries: Vec::new(),
            });
            run.queries.len() - 1
        });
        run.queries[idx].entries.push(RunEntry {
            doc_id: doc_id.to_string(),
            rank,
            score,
        });
    }
    for q in &mut run.queries {
        q.entries.sort_by_key(|e| e.rank);
    }
    Ok(run)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn corpus_preserves_order() {
        let text = br#"{"doc_id":"d1","text":"first doc"}
{"doc_id":"d2","title":"T","text":"second"}
"#;
        let c = parse_corpus(text).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get(0).unwrap().doc_id, "d1");
        assert_eq!(c.get(1).unwrap().title.as_deref(), Some("T"));
        assert_eq!(c.position("d2"), Some(1));
    }

    #[test]
    fn corpus_duplicate_id_cites_line() {
        let text = br#"{"doc_id":"d1","text":"a"}
{"doc_id":"d2","text":"b"}
{"doc_id":"d1","text":"c"}"#;
        match parse_corpus(text) {
            Err(Error::Format { line, message }) => {
                assert_eq!(line, Some(3));
                assert!(message.contains("d1"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corpus_missing_text_is_line_numbered() {
        let text = b"{\"doc_id\":\"d1\",\"text\":\"a\"}\n\n{\"doc_id\":\"d2\"}\n";
        match parse_corpus(text) {
            Err(Error::Format { line, .. }) => assert_eq!(line, Some(3)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corpus_rejects_invalid_utf8() {
        let text = b"{\"doc_id\":\"d1\",\"text\":\"\xff\"}\n";
        assert!(matches!(
            parse_corpus(text),
            Err(Error::Format { line: Some(1), .. })
        ));
    }

    #[test]
    fn queries_tsv() {
        let q = parse_queries(b"q1\thello world\nq2\tfoo\n").unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q[1].text, "foo");
        assert!(parse_queries(b"q1\ta\nq1\tb\n").is_err());
        assert!(parse_queries(b"q1 no tab\n").is_err());
    }

    #[test]
    fn qrels_parse() {
        let q = parse_qrels(b"q1 0 d1 1\nq1 0 d2 0\n").unwrap();
        assert_eq!(q.grade("q1", "d1"), Some(1));
        assert_eq!(q.grade("q1", "d2"), Some(0));
        assert_eq!(q.relevant("q1"), vec!["d1"]);
        assert!(parse_qrels(b"").unwrap().is_empty());
        assert!(matches!(
            parse_qrels(b"q1 0 d1 x\n"),
            Err(Error::Format { line: Some(1), .. })
        ));
        assert!(parse_qrels(b"q1 0 d1 1\nq1 0 d1 2\n").is_err());
        assert!(parse_qrels(b"q1 0 d1 -1\n").is_err());
    }

    #[test]
    fn embeddings_roundtrip_small() {
        let m = EmbeddingMatrix::new(
            4,
            vec!["a".into(), "b".into(), "c".into()],
            vec![0.0, 1.0, -2.5, 3.25, -0.0, 1e-30, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0],
        )
        .unwrap();
        let back = EmbeddingMatrix::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back.ids(), m.ids());
        let bits = |m: &EmbeddingMatrix| m.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn embeddings_empty_collection() {
        let m = EmbeddingMatrix::new(8, vec![], vec![]).unwrap();
        let back = EmbeddingMatrix::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back.dim(), 8);
        assert!(back.is_empty());
    }

    #[test]
    fn embeddings_corrupt() {
        let m = EmbeddingMatrix::new(2, vec!["a".into()], vec![1.0, 2.0]).unwrap();
        let mut bytes = m.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(EmbeddingMatrix::from_bytes(&bytes), Err(Error::Format { .. })));
        let bytes = m.to_bytes();
        assert!(EmbeddingMatrix::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(EmbeddingMatrix::new(0, vec![], vec![]).is_err());
    }

    #[test]
    fn run_format_matches_trec() {
        let mut run = RunFile::new("genrank");
        run.push_ranked("q1", [("d2", 6.0), ("d1", 1.0)]);
        assert_eq!(
            run.to_trec().unwrap(),
            "q1 Q0 d2 1 6.0 genrank\nq1 Q0 d1 2 1.0 genrank\n"
        );
        assert_eq!(RunFile::new("x").to_trec().unwrap(), "");
    }

    #[test]
    fn run_rejects_rank_gap_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.txt");
        let run = RunFile {
            tag: "t".into(),
            queries: vec![QueryRun {
                query_id: "q1".into(),
                entries: vec![
                    RunEntry { doc_id: "a".into(), rank: 1, score: 2.0 },
                    RunEntry { doc_id: "b".into(), rank: 3, score: 1.0 },
                ],
            }],
        };
        assert!(matches!(write_run(&run, &path), Err(Error::Argument(_))));
        assert!(!path.exists());

        let mut increasing = RunFile::new("t");
        increasing.push_ranked("q1", [("a", 1.0), ("b", 2.0)]);
        assert!(increasing.validate().is_err());
    }

    #[test]
    fn score_formatting() {
        assert_eq!(format_score(6.0), "6.0");
        assert_eq!(format_score(-0.25), "-0.25");
        assert_eq!(format_score(1.23456789), "1.23457");
        assert_eq!(format_score(0.0), "0.0");
    }

    proptest! {
        #[test]
        fn embeddings_roundtrip_bits(n in 0usize..6, dim in 1usize..6, seed in any::<u64>()) {
            let mut x = seed;
            let mut vals = Vec::new();
            for _ in 0..n * dim {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let v = f32::from_bits((x >> 32) as u32);
                vals.push(if v.is_finite() { v } else { 1.5 });
            }
            let ids = (0..n).map(|i| format!("doc-{i}")).collect();
            let m = EmbeddingMatrix::new(dim, ids, vals).unwrap();
            let back = EmbeddingMatrix::from_bytes(&m.to_bytes()).unwrap();
            prop_assert_eq!(back.dim(), m.dim());
            prop_assert_eq!(back.ids(), m.ids());
            let a: Vec<u32> = m.values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.values().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn run_reparse(scores in proptest::collection::vec(-1e6f64..1e6, 0..20)) {
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let mut run = RunFile::new("tag");
            run.push_ranked("q", sorted.iter().enumerate().map(|(i, s)| (format!("d{i}"), *s)));
            let back = parse_run(run.to_trec().unwrap().as_bytes()).unwrap();
            let entries = back.get("q").map(|q| q.entries.clone()).unwrap_or_default();
            prop_assert_eq!(entries.len(), sorted.len());
            for (e, s) in entries.iter().zip(&sorted) {
                let expect: f64 = format!("{s:.5e}").parse().unwrap();
                prop_assert_eq!(e.score, expect);
            }
        }
    }
}
