//! Corpus transformation and evaluation toolkit for language-based object
//! detection data.
//!
//! The crate turns detection and grounding annotations into description-rich,
//! context-sensitive training queries, and measures how sensitive a model's
//! predictions are to the language context of its queries:
//!
//! - [`model`]: shared domain types and their JSONL schemas
//! - [`vocab`]: frequency-ranked entity vocabulary from caption corpora
//! - [`provider`]: language-model prompts, response parsing, persistent cache
//! - [`querygen`]: composed-query generators (description-conditioned and
//!   name-list baseline) with token-budget packing and label assignment
//! - [`tokenize`]: offset-tracking tokenizers and the box-by-token
//!   alignment matrix
//! - [`eval`]: context-sensitivity metrics (delta-box, delta-conf, AP) and
//!   the corpus label-entropy audit

pub mod eval;
pub mod jsonl;
pub mod model;
pub mod provider;
pub mod querygen;
pub mod tokenize;
pub mod vocab;
