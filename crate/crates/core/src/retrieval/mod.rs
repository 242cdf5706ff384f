//! Sparse (BM25) and dense retrieval over an immutable document collection.

mod bm25;
mod dense;

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::Deserialize;
use thiserror::Error;

use crate::state::{Document, RankedList, StateError};

pub use bm25::{tokenize, Bm25Params, CorpusIndex, Posting, TokenizerConfig};
pub use dense::{
    dense_search, read_embeddings_jsonl, DenseRetriever, DenseStore, HttpEmbedder, QueryEmbedder,
    UNIT_NORM_TOLERANCE,
};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus contains no indexable tokens")]
    NoTokens,
    #[error("duplicate document id {0:?}")]
    DuplicateDocId(String),
    #[error("unknown document id {0:?}")]
    UnknownDocId(String),
    #[error("invalid document: {0}")]
    InvalidDocument(#[from] StateError),
    #[error("vector dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid vector for {doc_id:?}: {reason}")]
    InvalidVector { doc_id: String, reason: String },
    #[error("corrupt index: {0}")]
    CorruptIndex(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("query embedding failed: {0}")]
    Embedding(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lookup of document contents by id.
pub trait DocStore {
    fn document(&self, doc_id: &str) -> Option<&Document>;
}

impl DocStore for BTreeMap<String, Document> {
    fn document(&self, doc_id: &str) -> Option<&Document> {
        self.get(doc_id)
    }
}

impl DocStore for std::collections::HashMap<String, Document> {
    fn document(&self, doc_id: &str) -> Option<&Document> {
        self.get(doc_id)
    }
}

/// A static retriever: answers a text query with a ranked top-k list and can
/// resolve every id it returns.
pub trait Retriever: DocStore + Send + Sync {
    fn retrieve(&self, query: &str, k: usize) -> Result<RankedList, RetrievalError>;
}

#[derive(Deserialize)]
struct CorpusLine {
    doc_id: String,
    text: String,
}

/// Reads a JSONL corpus (`{"doc_id": ..., "text": ...}` per line). Blank lines
/// are skipped; errors carry the 1-based line number.
pub fn read_corpus_jsonl<R: BufRead>(reader: R) -> Result<Vec<Document>, RetrievalError> {
    let mut docs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(&line).map_err(|e| RetrievalError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let doc = Document::new(parsed.doc_id, parsed.text).map_err(|e| RetrievalError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}
