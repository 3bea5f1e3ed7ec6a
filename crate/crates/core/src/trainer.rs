//! Training objectives and a deterministic SGD loop.
//!
//! Three modes are supported:
//!
//! - `tied-contrastive`: document embeddings are the encoder's outputs on
//!   document text. InfoNCE over the positive, mined BM25 negatives and the
//!   other in-batch positives; gradients flow through both towers.
//! - `tied-marginmse`: same towers, regressing the student margin
//!   `q·d⁺ − q·d⁻` onto teacher margins.
//! - `free-dsi`: every document owns a free embedding row; the encoder output
//!   is scored against the whole table with softmax cross-entropy. A
//!   configurable fraction of samples are indexing samples (document text →
//!   its own id), the rest are retrieval samples (query → relevant id).
//!
//! All gradients are analytic and checked against central finite differences
//! in the tests.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bm25::Bm25Index;
use crate::corpus::{Collection, Document, EmbeddingMatrix, Query};
use crate::dense::log_sum_exp;
use crate::encoder::{featurize, l2_norm, EncoderParams, FeatureVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    TiedContrastive,
    TiedMarginMse,
    FreeDsi,
}

impl TrainMode {
    pub fn is_tied(self) -> bool {
        !matches!(self, TrainMode::FreeDsi)
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tied-contrastive" => Ok(TrainMode::TiedContrastive),
            "tied-marginmse" => Ok(TrainMode::TiedMarginMse),
            "free-dsi" => Ok(TrainMode::FreeDsi),
            other => Err(Error::arg(format!("unknown training mode {other:?}"))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::TiedContrastive => "tied-contrastive",
            TrainMode::TiedMarginMse => "tied-marginmse",
            TrainMode::FreeDsi => "free-dsi",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub negatives_per_query: usize,
    pub temperature: f64,
    /// Fraction of indexing samples per batch (free-dsi only).
    pub multitask_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::TiedContrastive,
            learning_rate: 0.1,
            steps: 1000,
            batch_size: 32,
            negatives_per_query: 4,
            temperature: 1.0,
            multitask_ratio: 0.5,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning rate must be positive"));
        }
        if self.batch_size < 1 {
            return Err(Error::arg("batch size must be >= 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::arg("temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.multitask_ratio) {
            return Err(Error::arg("multitask ratio must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One row of trainable parameters per document identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeEmbeddingTable {
    ids: Vec<String>,
    positions: HashMap<String, usize>,
    dim: usize,
    pub rows: Vec<f64>,
}

impl FreeEmbeddingTable {
    pub const INIT_RANGE: f64 = 0.05;

    pub fn new(ids: Vec<String>, dim: usize, rows: Vec<f64>) -> Result<Self> {
        if dim == 0 || rows.len() != ids.len() * dim {
            return Err(Error::arg("table shape does not match ids and dim"));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("table values must be finite"));
        }
        let positions = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect::<HashMap<_, _>>();
        if positions.len() != ids.len() {
            return Err(Error::arg("duplicate id in embedding table"));
        }
        Ok(FreeEmbeddingTable { ids, positions, dim, rows })
    }

    /// Uniform in `[-0.05, 0.05]` from the given seed.
    pub fn random(ids: Vec<String>, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..ids.len() * dim)
            .map(|_| rng.random_range(-Self::INIT_RANGE..=Self::INIT_RANGE))
            .collect();
        Self::new(ids, dim, rows)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.positions.get(doc_id).copied()
    }

    pub fn to_matrix(&self) -> Result<EmbeddingMatrix> {
        EmbeddingMatrix::new(
            self.dim,
            self.ids.clone(),
            self.rows.iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn from_matrix(matrix: &EmbeddingMatrix) -> Result<Self> {
        Self::new(
            matrix.ids().to_vec(),
            matrix.dim(),
            matrix.values().iter().map(|&v| v as f64).collect(),
        )
    }
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    pub grad_query: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negatives: Vec<Vec<f64>>,
}

/// `−log softmax` of the positive among positive and negatives, with
/// logits `q·d / τ`.
pub fn infonce_loss(q: &[f64], positive: &[f64], negatives: &[&[f64]], temperature: f64) -> Result<InfoNce> {
    if !(temperature > 0.0) {
        return Err(Error::arg("temperature must be positive"));
    }
    let d = q.len();
    if positive.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(Error::arg("infonce inputs differ in dimension"));
    }
    let mut logits = Vec::with_capacity(1 + negatives.len());
    logits.push(dot64(q, positive) / temperature);
    logits.extend(negatives.iter().map(|n| dot64(q, n) / temperature));
    let lse = log_sum_exp(&logits);
    // clamp guards the -0.0 / tiny negative rounding of lse - logit
    let loss = (lse - logits[0]).max(0.0);
    let probs: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();

    // dL/dlogit_j = p_j − [j = 0]
    let coef_pos = (probs[0] - 1.0) / temperature;
    let mut grad_query: Vec<f64> = positive.iter().map(|p| coef_pos * p).collect();
    let grad_positive: Vec<f64> = q.iter().map(|x| coef_pos * x).collect();
    let mut grad_negatives = Vec::with_capacity(negatives.len());
    for (n, p) in negatives.iter().zip(&probs[1..]) {
        let c = p / temperature;
        for (g, v) in grad_query.iter_mut().zip(n.iter()) {
            *g += c * v;
        }
        grad_negatives.push(q.iter().map(|x| c * x).collect());
    }
    Ok(InfoNce {
        loss,
        grad_query,
        grad_positive,
        grad_negatives,
    })
}

/// Mean squared error between student and teacher margins, with the
/// gradient w.r.t. each student margin.
pub fn margin_mse_loss(student: &[f64], teacher: &[f64]) -> Result<(f64, Vec<f64>)> {
    if student.len() != teacher.len() {
        return Err(Error::arg("student and teacher margin counts differ"));
    }
    if student.is_empty() {
        return Err(Error::arg("margin lists are empty"));
    }
    let n = student.len() as f64;
    let diffs: Vec<f64> = student.iter().zip(teacher).map(|(s, t)| s - t).collect();
    let loss = diffs.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diffs.iter().map(|d| 2.0 * d / n).collect();
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsiCe {
    pub loss: f64,
    pub grad_h: Vec<f64>,
    /// Same layout as the table rows.
    pub grad_table: Vec<f64>,
}

/// Softmax cross-entropy of `target` over logits `table · h`.
pub fn dsi_ce_loss(h: &[f64], table: &FreeEmbeddingTable, target: usize) -> Result<DsiCe> {
    if target >= table.len() {
        return Err(Error::arg(format!(
            "target {target} outside table of {} documents",
            table.len()
        )));
    }
    if h.len() != table.dim() {
        return Err(Error::arg("state and table dimensions differ"));
    }
    let logits: Vec<f64> = (0..table.len()).map(|i| dot64(h, table.row(i))).collect();
    let lse = log_sum_exp(&logits);
    let loss = (lse - logits[target]).max(0.0);
    let mut grad_h = vec![0.0; h.len()];
    let mut grad_table = vec![0.0; table.rows.len()];
    for (i, &l) in logits.iter().enumerate() {
        let coef = (l - lse).exp() - if i == target { 1.0 } else { 0.0 };
        for (g, v) in grad_h.iter_mut().zip(table.row(i)) {
            *g += coef * v;
        }
        for (g, x) in grad_table[i * table.dim()..(i + 1) * table.dim()].iter_mut().zip(h) {
            *g = coef * x;
        }
    }
    Ok(DsiCe {
        loss,
        grad_h,
        grad_table,
    })
}

/// Encoder plus, in free-dsi mode, the free document table.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub table: Option<FreeEmbeddingTable>,
}

impl Model {
    pub fn tied(encoder: EncoderParams) -> Self {
        Model { encoder, table: None }
    }

    pub fn free(encoder: EncoderParams, table: FreeEmbeddingTable) -> Self {
        Model {
            encoder,
            table: Some(table),
        }
    }

    pub fn query_vector(&self, text: &str) -> Result<Vec<f64>> {
        self.encoder.encode_text(text)
    }

    /// The document's identifier embedding. Tied models compute it from the
    /// text, so any document has one; free tables only know the ids they
    /// were trained with.
    pub fn document_vector(&self, doc: &Document) -> Result<Vec<f64>> {
        match &self.table {
            None => self.encoder.encode_text(&doc.full_text()),
            Some(table) => table
                .position(&doc.doc_id)
                .map(|i| table.row(i).to_vec())
                .ok_or_else(|| Error::MissingIdentifier(doc.doc_id.clone())),
        }
    }

    pub fn score(&self, query: &str, doc: &Document) -> Result<f64> {
        Ok(dot64(&self.query_vector(query)?, &self.document_vector(doc)?))
    }

    /// Document matrix for atomic decoding, aligned with the collection.
    pub fn document_matrix(&self, corpus: &Collection) -> Result<EmbeddingMatrix> {
        let dim = self.table.as_ref().map_or(self.encoder.dim(), FreeEmbeddingTable::dim);
        let mut rows = Vec::with_capacity(corpus.len() * dim);
        for doc in corpus.iter() {
            rows.extend(self.document_vector(doc)?.into_iter().map(|v| v as f32));
        }
        EmbeddingMatrix::new(dim, corpus.iter().map(|d| d.doc_id.clone()).collect(), rows)
    }
}

/// One optimization batch. For tied modes `inputs[i]` is the query and
/// `positives[i]` its relevant document; for free-dsi `inputs[i]` is either
/// a query or a document text and `positives[i]` the target identifier.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainBatch {
    pub inputs: Vec<FeatureVector>,
    pub positives: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
    /// Teacher margin per (input, negative), tied-marginmse only.
    pub teacher_margins: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub table: Option<Vec<f64>>,
}

impl Gradients {
    fn zeros(model: &Model) -> Self {
        Gradients {
            loss: 0.0,
            weight: vec![0.0; model.encoder.weight.len()],
            bias: vec![0.0; model.encoder.dim()],
            table: model.table.as_ref().map(|t| vec![0.0; t.rows.len()]),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.weight
            .iter()
            .chain(&self.bias)
            .chain(self.table.iter().flatten())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Encoder forward pass keeping what backprop needs.
struct Encoded {
    out: Vec<f64>,
    norm: Option<f64>,
}

fn forward(params: &EncoderParams, x: &FeatureVector) -> Result<Encoded> {
    let v = params.affine(x)?;
    let (out, norm) = if params.normalize {
        let n = l2_norm(&v);
        if n > 0.0 {
            (v.iter().map(|x| x / n).collect(), Some(n))
        } else {
            (v, None)
        }
    } else {
        (v, None)
    };
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("encoder output is not finite".into()));
    }
    Ok(Encoded { out, norm })
}

/// Accumulates `dL/d(out)` back into weight and bias gradients.
fn backward(params: &EncoderParams, x: &FeatureVector, enc: &Encoded, grad_out: &[f64], grads: &mut Gradients) {
    let grad_v: Vec<f64> = match enc.norm {
        Some(n) => {
            let proj = dot64(&enc.out, grad_out);
            grad_out.iter().zip(&enc.out).map(|(g, u)| (g - u * proj) / n).collect()
        }
        None => grad_out.to_vec(),
    };
    let d = params.dim();
    for &(f, c) in x.entries() {
        let row = &mut grads.weight[f as usize * d..(f as usize + 1) * d];
        let c = c as f64;
        for (w, g) in row.iter_mut().zip(&grad_v) {
            *w += c * g;
        }
    }
    for (b, g) in grads.bias.iter_mut().zip(&grad_v) {
        *b += g;
    }
}

fn check_batch(model: &Model, docs: &[FeatureVector], batch: &TrainBatch, mode: TrainMode) -> Result<()> {
    let n = batch.inputs.len();
    if batch.positives.len() != n || batch.negatives.len() != n {
        return Err(Error::arg("batch inputs, positives and negatives differ in length"));
    }
    match (mode, &batch.teacher_margins) {
        (TrainMode::TiedMarginMse, Some(m)) => {
            if m.len() != n || m.iter().zip(&batch.negatives).any(|(a, b)| a.len() != b.len()) {
                return Err(Error::arg("teacher margins do not align with negatives"));
            }
        }
        (TrainMode::TiedMarginMse, None) => {
            return Err(Error::arg("tied-marginmse batch has no teacher margins"))
        }
        (_, Some(_)) => return Err(Error::arg(format!("{mode} batch must not carry teacher margins"))),
        _ => {}
    }
    let n_docs = match (&model.table, mode) {
        (Some(t), TrainMode::FreeDsi) => t.len(),
        (None, TrainMode::FreeDsi) => return Err(Error::arg("free-dsi needs an embedding table")),
        (Some(_), _) => return Err(Error::arg(format!("{mode} does not use an embedding table"))),
        (None, _) => docs.len(),
    };
    for (i, (&p, negs)) in batch.positives.iter().zip(&batch.negatives).enumerate() {
        if p >= n_docs || negs.iter().any(|&d| d >= n_docs) {
            return Err(Error::arg(format!("batch item {i} references an unknown document")));
        }
        if negs.contains(&p) {
            return Err(Error::arg(format!("batch item {i} lists its positive as a negative")));
        }
    }
    Ok(())
}

/// Mean batch loss and its gradient w.r.t. every trainable parameter.
pub fn compute_gradients(
    model: &Model,
    docs: &[FeatureVector],
    batch: &TrainBatch,
    config: &TrainConfig,
) -> Result<Gradients> {
    check_batch(model, docs, batch, config.mode)?;
    let mut grads = Gradients::zeros(model);
    let n = batch.inputs.len();
    if n == 0 {
        return Ok(grads);
    }
    let scale = 1.0 / n as f64;
    let params = &model.encoder;
    let queries = batch
        .inputs
        .iter()
        .map(|x| forward(params, x))
        .collect::<Result<Vec<_>>>()?;
    let mut grad_queries = vec![vec![0.0; params.dim()]; n];

    match config.mode {
        TrainMode::FreeDsi => {
            let table = model.table.as_ref().unwrap();
            let grad_table = grads.table.as_mut().unwrap();
            for (i, q) in queries.iter().enumerate() {
                let out = dsi_ce_loss(&q.out, table, batch.positives[i])?;
                grads.loss += scale * out.loss;
                grad_queries[i] = out.grad_h.iter().map(|g| scale * g).collect();
                for (acc, g) in grad_table.iter_mut().zip(&out.grad_table) {
                    *acc += scale * g;
                }
            }
        }
        TrainMode::TiedContrastive | TrainMode::TiedMarginMse => {
            // encode each referenced document once
            let mut doc_slot: HashMap<usize, usize> = HashMap::new();
            let mut doc_order: Vec<usize> = Vec::new();
            for d in batch.positives.iter().chain(batch.negatives.iter().flatten()) {
                doc_slot.entry(*d).or_insert_with(|| {
                    doc_order.push(*d);
                    doc_order.len() - 1
                });
            }
            let encoded = doc_order
                .iter()
                .map(|&d| forward(params, &docs[d]))
                .collect::<Result<Vec<_>>>()?;
            let mut grad_docs = vec![vec![0.0; params.dim()]; doc_order.len()];

            if config.mode == TrainMode::TiedContrastive {
                for i in 0..n {
                    let pos = doc_slot[&batch.positives[i]];
                    let neg_slots: Vec<usize> = batch.negatives[i].iter().map(|d| doc_slot[d]).collect();
                    let negs: Vec<&[f64]> = neg_slots.iter().map(|&s| encoded[s].out.as_slice()).collect();
                    let out = infonce_loss(&queries[i].out, &encoded[pos].out, &negs, config.temperature)?;
                    grads.loss += scale * out.loss;
                    axpy(&mut grad_queries[i], scale, &out.grad_query);
                    axpy(&mut grad_docs[pos], scale, &out.grad_positive);
                    for (&s, g) in neg_slots.iter().zip(&out.grad_negatives) {
                        axpy(&mut grad_docs[s], scale, g);
                    }
                }
            } else {
                let margins = batch.teacher_margins.as_ref().unwrap();
                let mut student = Vec::new();
                let mut teacher = Vec::new();
                let mut pairs = Vec::new();
                for i in 0..n {
                    let q = &queries[i].out;
                    let pos = doc_slot[&batch.positives[i]];
                    let qp = dot64(q, &encoded[pos].out);
                    for (j, d) in batch.negatives[i].iter().enumerate() {
                        let neg = doc_slot[d];
                        student.push(qp - dot64(q, &encoded[neg].out));
                        teacher.push(margins[i][j]);
                        pairs.push((i, pos, neg));
                    }
                }
                if !student.is_empty() {
                    let (loss, g) = margin_mse_loss(&student, &teacher)?;
                    grads.loss = loss;
                    for (&(i, pos, neg), &gm) in pairs.iter().zip(&g) {
                        let q = &queries[i].out;
                        let diff: Vec<f64> = encoded[pos].out.iter().zip(&encoded[neg].out).map(|(a, b)| a - b).collect();
                        axpy(&mut grad_queries[i], gm, &diff);
                        axpy(&mut grad_docs[pos], gm, q);
                        axpy(&mut grad_docs[neg], -gm, q);
                    }
                }
            }
            for ((&d, enc), g) in doc_order.iter().zip(&encoded).zip(&grad_docs) {
                backward(params, &docs[d], enc, g, &mut grads);
            }
        }
    }
    for ((x, enc), g) in batch.inputs.iter().zip(&queries).zip(&grad_queries) {
        backward(params, x, enc, g, &mut grads);
    }
    Ok(grads)
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (y, v) in acc.iter_mut().zip(x) {
        *y += a * v;
    }
}

/// Plain SGD step.
pub fn apply_gradients(model: &mut Model, grads: &Gradients, learning_rate: f64) {
    axpy(&mut model.encoder.weight, -learning_rate, &grads.weight);
    axpy(&mut model.encoder.bias, -learning_rate, &grads.bias);
    if let (Some(table), Some(g)) = (model.table.as_mut(), grads.table.as_ref()) {
        axpy(&mut table.rows, -learning_rate, g);
    }
}

/// Raw training inputs, by id.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub corpus: &'a Collection,
    pub queries: &'a [Query],
    /// (query_id, positive doc_id)
    pub pairs: &'a [(String, String)],
    /// Mined negatives per query id, best first.
    pub negatives: &'a HashMap<String, Vec<String>>,
    /// Teacher margin keyed by (query_id, negative doc_id).
    pub teacher_margins: Option<&'a HashMap<(String, String), f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean batch loss before each step's update.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// `step TAB loss` lines.
    pub fn loss_log(&self) -> String {
        let mut out = String::new();
        for (step, loss) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "{step}\t{loss}");
        }
        out
    }
}

/// Training inputs resolved to indices and features.
pub struct Trainer {
    config: TrainConfig,
    doc_features: Vec<FeatureVector>,
    /// (query features index, doc index)
    pairs: Vec<(usize, usize)>,
    query_features: Vec<FeatureVector>,
    positives_of: Vec<HashSet<usize>>,
    mined: Vec<Vec<(usize, Option<f64>)>>,
}

impl Trainer {
    pub fn new(data: TrainingData<'_>, config: TrainConfig, features: usize) -> Result<Self> {
        config.validate()?;
        let query_pos: HashMap<&str, usize> = data
            .queries
            .iter()
            .enumerate()
            .map(|(i, q)| (q.query_id.as_str(), i))
            .collect();
        let mut pairs = Vec::with_capacity(data.pairs.len());
        let mut positives_of = vec![HashSet::new(); data.queries.len()];
        for (qid, did) in data.pairs {
            let q = *query_pos
                .get(qid.as_str())
                .ok_or_else(|| Error::arg(format!("pair references unknown query {qid:?}")))?;
            let d = data
                .corpus
                .position(did)
                .ok_or_else(|| Error::arg(format!("pair references unknown document {did:?}")))?;
            pairs.push((q, d));
            positives_of[q].insert(d);
        }
        if config.mode == TrainMode::TiedMarginMse && data.teacher_margins.is_none() {
            return Err(Error::arg("tied-marginmse needs teacher margins"));
        }
        let mut mined = vec![Vec::new(); data.queries.len()];
        for (q, query) in data.queries.iter().enumerate() {
            let Some(list) = data.negatives.get(&query.query_id) else {
                continue;
            };
            for did in list {
                let d = data.corpus.position(did).ok_or_else(|| {
                    Error::arg(format!("negative {did:?} for {} is not in the corpus", query.query_id))
                })?;
                if positives_of[q].contains(&d) || mined[q].iter().any(|&(x, _)| x == d) {
                    continue;
                }
                if mined[q].len() == config.negatives_per_query {
                    break;
                }
                let margin = match data.teacher_margins {
                    Some(m) => Some(*m.get(&(query.query_id.clone(), did.clone())).ok_or_else(|| {
                        Error::arg(format!("no teacher margin for ({}, {did})", query.query_id))
                    })?),
                    None => None,
                };
                mined[q].push((d, margin));
            }
        }
        let doc_features = data
            .corpus
            .iter()
            .map(|d| featurize(&d.full_text(), features))
            .collect();
        let query_features = data.queries.iter().map(|q| featurize(&q.text, features)).collect();
        Ok(Trainer {
            config,
            doc_features,
            pairs,
            query_features,
            positives_of,
            mined,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn doc_features(&self) -> &[FeatureVector] {
        &self.doc_features
    }

    /// Builds a batch from pair indices. `indexing` lists document indices
    /// to add as free-dsi indexing samples.
    pub fn batch(&self, pair_ids: &[usize], indexing: &[usize]) -> TrainBatch {
        let mut batch = TrainBatch::default();
        let margins_on = self.config.mode == TrainMode::TiedMarginMse;
        let mut margins = Vec::new();
        for (slot, &p) in pair_ids.iter().enumerate() {
            let (q, d) = self.pairs[p];
            batch.inputs.push(self.query_features[q].clone());
            batch.positives.push(d);
            let mut negs: Vec<usize> = Vec::new();
            let mut m = Vec::new();
            if self.config.mode != TrainMode::FreeDsi {
                for &(n, margin) in &self.mined[q] {
                    negs.push(n);
                    m.push(margin.unwrap_or(0.0));
                }
            }
            if self.config.mode == TrainMode::TiedContrastive {
                for (other, &op) in pair_ids.iter().enumerate() {
                    let od = self.pairs[op].1;
                    if other != slot && !self.positives_of[q].contains(&od) && !negs.contains(&od) {
                        negs.push(od);
                    }
                }
            }
            batch.negatives.push(negs);
            margins.push(m);
        }
        for &d in indexing {
            batch.inputs.push(self.doc_features[d].clone());
            batch.positives.push(d);
            batch.negatives.push(Vec::new());
            margins.push(Vec::new());
        }
        if margins_on {
            batch.teacher_margins = Some(margins);
        }
        batch
    }

    fn sample_batch(&self, rng: &mut ChaCha8Rng) -> TrainBatch {
        let size = self.config.batch_size.min(self.pairs.len());
        let mut picked: Vec<usize> = if size == 0 {
            Vec::new()
        } else {
            sample(rng, self.pairs.len(), size).into_vec()
        };
        let mut indexing = Vec::new();
        if self.config.mode == TrainMode::FreeDsi {
            let n_docs = self.doc_features.len();
            let mut retrieval = Vec::with_capacity(picked.len());
            for _ in 0..self.config.batch_size {
                if rng.random::<f64>() < self.config.multitask_ratio || picked.is_empty() {
                    indexing.push(rng.random_range(0..n_docs));
                } else {
                    retrieval.push(picked.pop().unwrap());
                }
            }
            picked = retrieval;
        }
        self.batch(&picked, &indexing)
    }

    /// Runs exactly `config.steps` SGD steps from `model`.
    pub fn train(&self, mut model: Model) -> Result<TrainOutcome> {
        if self.config.mode == TrainMode::FreeDsi {
            match &model.table {
                Some(t) if t.len() == self.doc_features.len() => {}
                _ => return Err(Error::arg("free-dsi model needs one table row per document")),
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut losses = Vec::with_capacity(self.config.steps);
        for step in 0..self.config.steps {
            let batch = self.sample_batch(&mut rng);
            let grads = compute_gradients(&model, &self.doc_features, &batch, &self.config)?;
            if !grads.loss.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at step {step}")));
            }
            losses.push(grads.loss);
            apply_gradients(&mut model, &grads, self.config.learning_rate);
        }
        Ok(TrainOutcome { model, losses })
    }

    /// Mean loss over every training pair, batched in input order. No
    /// randomness and no indexing samples, so two models can be compared
    /// on identical batches.
    pub fn dataset_loss(&self, model: &Model) -> Result<f64> {
        let ids: Vec<usize> = (0..self.pairs.len()).collect();
        let mut total = 0.0;
        for chunk in ids.chunks(self.config.batch_size) {
            let batch = self.batch(chunk, &[]);
            total += compute_gradients(model, &self.doc_features, &batch, &self.config)?.loss * chunk.len() as f64;
        }
        Ok(if ids.is_empty() { 0.0 } else { total / ids.len() as f64 })
    }
}

/// Convenience wrapper: resolve inputs, then train.
pub fn train(model: Model, data: TrainingData<'_>, config: TrainConfig) -> Result<TrainOutcome> {
    let features = model.encoder.features();
    Trainer::new(data, config, features)?.train(model)
}

/// Teacher margins from BM25 scores, `bm25(q, d⁺) − bm25(q, d⁻)`, for every
/// (query, mined negative) pair. A stand-in teacher when no cross-encoder
/// scores are available.
pub fn bm25_teacher_margins(
    index: &Bm25Index,
    queries: &[Query],
    pairs: &[(String, String)],
    negatives: &HashMap<String, Vec<String>>,
) -> HashMap<(String, String), f64> {
    let positions: HashMap<&str, usize> = index.ids().iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
    let mut out = HashMap::new();
    for q in queries {
        let Some(pos) = pairs.iter().find(|(qid, _)| *qid == q.query_id).map(|(_, d)| d) else {
            continue;
        };
        let scores = index.score_all(&q.text);
        let Some(&p) = positions.get(pos.as_str()) else { continue };
        for neg in negatives.get(&q.query_id).into_iter().flatten() {
            if let Some(&n) = positions.get(neg.as_str()) {
                out.insert((q.query_id.clone(), neg.clone()), scores[p] - scores[n]);
            }
        }
    }
    out
}
