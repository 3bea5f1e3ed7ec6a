//! Generative retrieval viewed as dense retrieval.
//!
//! The crate implements the two generative-retrieval document identifier
//! schemes (atomic DocIDs decoded in one step, hierarchical semantic DocIDs
//! decoded by beam search over a k-means trie) next to exact and tree-pruned
//! maximum inner product search, so that the correspondences between the two
//! paradigms can be checked as exact equalities.
//!
//! Module map:
//!
//! - [`corpus`]: documents, queries, qrels, embedding matrices, TREC run files
//! - [`encoder`]: hashed bag-of-words featurizer and a linear text encoder
//! - [`dense`]: dot-product scoring, flat top-k and tree-pruned search
//! - [`tree`]: recursive k-means identifiers (the semantic trie)
//! - [`decoder`]: atomic and beam decoding over the trie
//! - [`bm25`]: lexical baseline and hard-negative mining
//! - [`trainer`]: contrastive, margin-MSE and DSI cross-entropy training
//! - [`eval`]: Recall@k and MRR@k
//! - [`verify`]: the cross-paradigm equivalence suite behind `genrank verify`
//! - [`synth`]: seeded synthetic corpora for desk-scale experiments

pub mod bm25;
pub mod cli;
pub mod corpus;
pub mod decoder;
pub mod dense;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod synth;
pub mod trainer;
pub mod tree;
pub mod verify;

pub use error::{Error, Result};
