//! Exact cosine retrieval over externally supplied embeddings.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{DocStore, RetrievalError, Retriever};
use crate::state::{Document, ListSource, RankedList};

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct DenseStore {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
    embed_endpoint: Option<String>,
}

fn normalize(doc_id: &str, v: &mut [f64]) -> Result<(), RetrievalError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(RetrievalError::InvalidVector {
            doc_id: doc_id.to_string(),
            reason: "non-finite component".into(),
        });
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(RetrievalError::InvalidVector {
            doc_id: doc_id.to_string(),
            reason: "zero vector".into(),
        });
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

impl DenseStore {
    /// Builds a store from raw vectors, normalizing each to unit length.
    pub fn new<I>(records: I, embed_endpoint: Option<String>) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut dim = None;
        let mut vectors = BTreeMap::new();
        for (doc_id, mut v) in records {
            crate::state::validate_doc_id(&doc_id)?;
            let expected = *dim.get_or_insert(v.len());
            if expected == 0 {
                return Err(RetrievalError::InvalidVector {
                    doc_id,
                    reason: "empty vector".into(),
                });
            }
            if v.len() != expected {
                return Err(RetrievalError::DimensionMismatch {
                    expected,
                    got: v.len(),
                });
            }
            normalize(&doc_id, &mut v)?;
            if vectors.contains_key(&doc_id) {
                return Err(RetrievalError::DuplicateDocId(doc_id));
            }
            vectors.insert(doc_id, v);
        }
        let dim = dim.ok_or(RetrievalError::EmptyCorpus)?;
        Ok(Self {
            dim,
            vectors,
            embed_endpoint,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, doc_id: &str) -> Option<&[f64]> {
        self.vectors.get(doc_id).map(Vec::as_slice)
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(String::as_str)
    }

    pub fn embed_endpoint(&self) -> Option<&str> {
        self.embed_endpoint.as_deref()
    }

    /// Top-k `(doc_id, cosine)` pairs, best first, ties by ascending doc_id.
    pub fn search_scored(
        &self,
        query_vector: &[f64],
        k: usize,
    ) -> Result<Vec<(String, f64)>, RetrievalError> {
        if query_vector.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: query_vector.len(),
            });
        }
        let mut q = query_vector.to_vec();
        normalize("<query>", &mut q)?;
        let mut scored: Vec<(String, f64)> = self
            .vectors
            .iter()
            .map(|(id, v)| (id.clone(), v.iter().zip(&q).map(|(a, b)| a * b).sum()))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }
}

pub fn dense_search(
    store: &DenseStore,
    query_vector: &[f64],
    k: usize,
) -> Result<RankedList, RetrievalError> {
    let ids = store
        .search_scored(query_vector, k)?
        .into_iter()
        .map(|(id, _)| id)
        .collect();
    Ok(RankedList::from_unique(ids, ListSource::InitialRetrieval))
}

#[derive(Deserialize)]
struct EmbeddingLine {
    doc_id: String,
    vector: Vec<f64>,
}

/// Reads `{"doc_id": ..., "vector": [...]}` lines.
pub fn read_embeddings_jsonl<R: BufRead>(reader: R) -> Result<Vec<(String, Vec<f64>)>, RetrievalError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingLine = serde_json::from_str(&line).map_err(|e| RetrievalError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push((rec.doc_id, rec.vector));
    }
    Ok(out)
}

/// Turns query text into a vector in the store's embedding space.
pub trait QueryEmbedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError>;
}

/// Embeddings-API client: POSTs `{"model", "input"}` and reads `data[0].embedding`.
pub struct HttpEmbedder {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: Option<String>,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Result<Self, RetrievalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| RetrievalError::Embedding(e.to_string()))?;
        Ok(Self {
            client,
            url: url.into(),
            model: model.into(),
            api_key,
        })
    }
}

impl QueryEmbedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        let mut req = self
            .client
            .post(&self.url)
            .json(&json!({ "model": self.model, "input": text }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| RetrievalError::Embedding(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(RetrievalError::Embedding(format!("endpoint returned {status}")));
        }
        let body: serde_json::Value = resp
            .json()
            .map_err(|e| RetrievalError::Embedding(e.to_string()))?;
        body["data"][0]["embedding"]
            .as_array()
            .and_then(|a| a.iter().map(|x| x.as_f64()).collect::<Option<Vec<f64>>>())
            .ok_or_else(|| RetrievalError::Embedding("response lacks data[0].embedding".into()))
    }
}

/// Dense retriever: embeds the query, then scores against a [`DenseStore`].
pub struct DenseRetriever {
    store: DenseStore,
    docs: HashMap<String, Document>,
    embedder: Box<dyn QueryEmbedder>,
}

impl DenseRetriever {
    /// Every vector in the store must have a matching document.
    pub fn new(
        store: DenseStore,
        docs: Vec<Document>,
        embedder: Box<dyn QueryEmbedder>,
    ) -> Result<Self, RetrievalError> {
        let docs: HashMap<String, Document> =
            docs.into_iter().map(|d| (d.doc_id.clone(), d)).collect();
        if let Some(missing) = store.doc_ids().find(|id| !docs.contains_key(*id)) {
            return Err(RetrievalError::UnknownDocId(missing.to_string()));
        }
        Ok(Self {
            store,
            docs,
            embedder,
        })
    }

    pub fn store(&self) -> &DenseStore {
        &self.store
    }
}

impl DocStore for DenseRetriever {
    fn document(&self, doc_id: &str) -> Option<&Document> {
        self.docs.get(doc_id)
    }
}

impl Retriever for DenseRetriever {
    fn retrieve(&self, query: &str, k: usize) -> Result<RankedList, RetrievalError> {
        let v = self.embedder.embed(query)?;
        dense_search(&self.store, &v, k)
    }
}
