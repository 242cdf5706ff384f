//! Okapi BM25 over an in-memory inverted index.
//!
//! ```text
//! score(D, Q) = sum_t IDF(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |D| / avgdl))
//! IDF(t)      = ln(1 + (N - df + 0.5) / (df + 0.5))
//! ```

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{DocStore, RetrievalError, Retriever};
use crate::state::{Document, ListSource, RankedList};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub lowercase: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { lowercase: true }
    }
}

/// Splits on every non-alphanumeric character. No stemming, no stopwords.
pub fn tokenize(text: &str, config: &TokenizerConfig) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| {
            if config.lowercase {
                t.to_lowercase()
            } else {
                t.to_string()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc_id: String,
    pub tf: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusIndex {
    tokenizer: TokenizerConfig,
    params: Bm25Params,
    /// Postings sorted by doc_id.
    postings: BTreeMap<String, Vec<Posting>>,
    doc_lengths: BTreeMap<String, u32>,
    avg_doc_length: f64,
    doc_count: usize,
    doc_store: BTreeMap<String, Document>,
}

impl CorpusIndex {
    pub fn build<I>(corpus: I, tokenizer: TokenizerConfig) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = Document>,
    {
        Self::build_with_params(corpus, tokenizer, Bm25Params::default())
    }

    pub fn build_with_params<I>(
        corpus: I,
        tokenizer: TokenizerConfig,
        params: Bm25Params,
    ) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = Document>,
    {
        let mut doc_store = BTreeMap::new();
        let mut doc_lengths = BTreeMap::new();
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut total_len: u64 = 0;

        for doc in corpus {
            crate::state::validate_doc_id(&doc.doc_id)?;
            if doc_store.contains_key(&doc.doc_id) {
                return Err(RetrievalError::DuplicateDocId(doc.doc_id));
            }
            let tokens = tokenize(&doc.text, &tokenizer);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc_id: doc.doc_id.clone(),
                    tf: count,
                });
            }
            total_len += tokens.len() as u64;
            doc_lengths.insert(doc.doc_id.clone(), tokens.len() as u32);
            doc_store.insert(doc.doc_id.clone(), doc);
        }

        if doc_store.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        if total_len == 0 {
            return Err(RetrievalError::NoTokens);
        }
        for list in postings.values_mut() {
            list.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        }
        let doc_count = doc_store.len();
        Ok(Self {
            tokenizer,
            params,
            postings,
            doc_lengths,
            avg_doc_length: total_len as f64 / doc_count as f64,
            doc_count,
            doc_store,
        })
    }

    /// Re-checks structural invariants, e.g. after deserializing.
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let corrupt = |m: String| Err(RetrievalError::CorruptIndex(m));
        if self.doc_count == 0 || self.doc_count != self.doc_store.len() {
            return corrupt(format!(
                "doc_count {} does not match {} stored documents",
                self.doc_count,
                self.doc_store.len()
            ));
        }
        if self.doc_lengths.len() != self.doc_count {
            return corrupt("doc_lengths does not cover every document".into());
        }
        let total: u64 = self.doc_lengths.values().map(|&l| l as u64).sum();
        let mean = total as f64 / self.doc_count as f64;
        if self.avg_doc_length.is_nan() || self.avg_doc_length <= 0.0
            || ((self.avg_doc_length - mean) / mean).abs() > 1e-9
        {
            return corrupt(format!(
                "avg_doc_length {} differs from mean {}",
                self.avg_doc_length, mean
            ));
        }
        for (term, list) in &self.postings {
            for p in list {
                if !self.doc_store.contains_key(&p.doc_id) {
                    return corrupt(format!("term {term:?} points at unknown doc {:?}", p.doc_id));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, RetrievalError> {
        let index: Self = serde_json::from_str(text)
            .map_err(|e| RetrievalError::CorruptIndex(e.to_string()))?;
        index.validate()?;
        Ok(index)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("index serializes")
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<u32> {
        self.doc_lengths.get(doc_id).copied()
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn tokenizer(&self) -> &TokenizerConfig {
        &self.tokenizer
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.doc_store.values()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count as f64;
        let df = self.document_frequency(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, doc_len: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = 1.0 - b + b * doc_len as f64 / self.avg_doc_length;
        idf * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    fn term_frequency(&self, term: &str, doc_id: &str) -> u32 {
        let list = self.postings(term);
        list.binary_search_by(|p| p.doc_id.as_str().cmp(doc_id))
            .map(|i| list[i].tf)
            .unwrap_or(0)
    }

    /// BM25 score of one document; repeated query terms contribute repeatedly.
    pub fn bm25_score(&self, query_terms: &[String], doc_id: &str) -> Result<f64, RetrievalError> {
        let doc_len = self
            .doc_length(doc_id)
            .ok_or_else(|| RetrievalError::UnknownDocId(doc_id.to_string()))?;
        let mut score = 0.0;
        for term in query_terms {
            let tf = self.term_frequency(term, doc_id);
            if tf > 0 {
                score += self.term_weight(self.idf(term), tf, doc_len);
            }
        }
        Ok(score)
    }

    /// Top-k `(doc_id, score)` pairs with positive score, best first, ties by
    /// ascending doc_id.
    pub fn search_scored(&self, query: &str, k: usize) -> Vec<(String, f64)> {
        let terms = tokenize(query, &self.tokenizer);
        // Accumulation follows query-term order so totals match bm25_score bit for bit.
        let mut acc: HashMap<&str, f64> = HashMap::new();
        for term in &terms {
            let list = self.postings(term);
            if list.is_empty() {
                continue;
            }
            let idf = self.idf(term);
            for p in list {
                let len = self.doc_lengths[&p.doc_id];
                *acc.entry(p.doc_id.as_str()).or_insert(0.0) += self.term_weight(idf, p.tf, len);
            }
        }
        let mut scored: Vec<(String, f64)> = acc
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .map(|(id, s)| (id.to_string(), s))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }

    pub fn search(&self, query: &str, k: usize) -> RankedList {
        let ids = self.search_scored(query, k).into_iter().map(|(id, _)| id).collect();
        RankedList::from_unique(ids, ListSource::InitialRetrieval)
    }
}

impl DocStore for CorpusIndex {
    fn document(&self, doc_id: &str) -> Option<&Document> {
        self.doc_store.get(doc_id)
    }
}

impl Retriever for CorpusIndex {
    fn retrieve(&self, query: &str, k: usize) -> Result<RankedList, RetrievalError> {
        Ok(self.search(query, k))
    }
}
