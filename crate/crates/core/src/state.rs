//! Reasoning states, decisions and trajectories.
//!
//! A reasoning state is the pair `(query, ranked documents)` at step `t`.
//! Every action maps one state to the next; the engine records each move as a
//! [`Transition`] and the full run as a [`Trajectory`].

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on the number of entries a ranked list may hold.
pub const DEFAULT_MAX_LIST_SIZE: usize = 100;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StateError {
    #[error("document id must not be empty")]
    EmptyDocId,
    #[error("document id {0:?} contains a newline")]
    NewlineInDocId(String),
    #[error("duplicate document id {0:?} in ranked list")]
    DuplicateEntry(String),
    #[error("query must not be empty")]
    EmptyQuery,
    #[error("ranked list has {len} entries, limit is {max}")]
    ListTooLong { len: usize, max: usize },
}

/// Checks the id rules shared by corpus documents and ranked-list entries.
pub fn validate_doc_id(id: &str) -> Result<(), StateError> {
    if id.is_empty() {
        return Err(StateError::EmptyDocId);
    }
    if id.contains('\n') || id.contains('\r') {
        return Err(StateError::NewlineInDocId(id.to_string()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Result<Self, StateError> {
        let doc_id = doc_id.into();
        validate_doc_id(&doc_id)?;
        Ok(Self {
            doc_id,
            text: text.into(),
        })
    }
}

/// Where the current ordering of a ranked list came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ListSource {
    InitialRetrieval,
    RefineMerge,
    Rerank,
}

/// Ordered, duplicate-free list of document ids; position 0 is rank 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    entries: Vec<String>,
    source: ListSource,
}

impl RankedList {
    pub fn new(entries: Vec<String>, source: ListSource) -> Result<Self, StateError> {
        let mut seen = HashSet::with_capacity(entries.len());
        for id in &entries {
            validate_doc_id(id)?;
            if !seen.insert(id.as_str()) {
                return Err(StateError::DuplicateEntry(id.clone()));
            }
        }
        Ok(Self { entries, source })
    }

    /// Caller guarantees uniqueness and valid ids.
    pub(crate) fn from_unique(entries: Vec<String>, source: ListSource) -> Self {
        debug_assert!(Self::new(entries.clone(), source).is_ok());
        Self { entries, source }
    }

    pub fn empty(source: ListSource) -> Self {
        Self {
            entries: Vec::new(),
            source,
        }
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn source(&self) -> ListSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.entries.iter().any(|e| e == doc_id)
    }

    pub fn into_entries(self) -> Vec<String> {
        self.entries
    }
}

/// The state `(query, docs)` at step `step`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningState {
    query: String,
    docs: RankedList,
    step: u32,
}

impl ReasoningState {
    /// Builds the step-0 state from the user query and its first retrieval.
    pub fn initial(
        query: impl Into<String>,
        docs: RankedList,
        max_list_size: usize,
    ) -> Result<Self, StateError> {
        let docs = RankedList::from_unique(docs.into_entries(), ListSource::InitialRetrieval);
        Self::new(query, docs, 0, max_list_size)
    }

    pub fn new(
        query: impl Into<String>,
        docs: RankedList,
        step: u32,
        max_list_size: usize,
    ) -> Result<Self, StateError> {
        let query = query.into();
        if query.trim().is_empty() {
            return Err(StateError::EmptyQuery);
        }
        if docs.len() > max_list_size {
            return Err(StateError::ListTooLong {
                len: docs.len(),
                max: max_list_size,
            });
        }
        let docs = if step == 0 {
            RankedList::from_unique(docs.into_entries(), ListSource::InitialRetrieval)
        } else {
            docs
        };
        Ok(Self { query, docs, step })
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn docs(&self) -> &RankedList {
        &self.docs
    }

    pub fn step(&self) -> u32 {
        self.step
    }
}

/// True when both states carry the same (trimmed) query and the same ordered
/// document list. The list source and step index are ignored.
pub fn state_equivalent(a: &ReasoningState, b: &ReasoningState) -> bool {
    a.query.trim().as_bytes() == b.query.trim().as_bytes() && a.docs.entries == b.docs.entries
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Refine,
    Rerank,
    Stop,
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionKind::Refine => "refine",
            ActionKind::Rerank => "rerank",
            ActionKind::Stop => "stop",
        })
    }
}

/// One parsed policy output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Refine {
        refined_query: String,
        reason: Option<String>,
    },
    Rerank {
        reranked_ids: Vec<String>,
        reason: Option<String>,
    },
    Stop,
}

impl Decision {
    pub fn kind(&self) -> ActionKind {
        match self {
            Decision::Refine { .. } => ActionKind::Refine,
            Decision::Rerank { .. } => ActionKind::Rerank,
            Decision::Stop => ActionKind::Stop,
        }
    }

    pub fn reason(&self) -> Option<&str> {
        match self {
            Decision::Refine { reason, .. } | Decision::Rerank { reason, .. } => reason.as_deref(),
            Decision::Stop => None,
        }
    }

    pub fn is_stop(&self) -> bool {
        matches!(self, Decision::Stop)
    }
}

/// Why a trajectory ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopCause {
    PolicyStop,
    EquivalenceStop,
    StepCap,
    PolicyFailureFallback,
}

impl fmt::Display for StopCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopCause::PolicyStop => "policy-stop",
            StopCause::EquivalenceStop => "equivalence-stop",
            StopCause::StepCap => "step-cap",
            StopCause::PolicyFailureFallback => "policy-failure-fallback",
        })
    }
}

/// Ids a rerank proposal named that were not in the list, and ids it left out.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanitizeReport {
    pub dropped_ids: Vec<String>,
    pub reappended_ids: Vec<String>,
}

impl SanitizeReport {
    pub fn is_clean(&self) -> bool {
        self.dropped_ids.is_empty() && self.reappended_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub decision: Decision,
    pub pre_state: ReasoningState,
    pub post_state: ReasoningState,
    /// Output tokens of every policy attempt behind this decision.
    pub output_tokens: u64,
    pub policy_temperature_used: f64,
    pub attempts: u32,
    pub sanitize: Option<SanitizeReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub query_id: String,
    pub initial: ReasoningState,
    pub transitions: Vec<Transition>,
    pub stop_cause: StopCause,
}

impl Trajectory {
    pub fn final_state(&self) -> &ReasoningState {
        self.transitions
            .last()
            .map(|t| &t.post_state)
            .unwrap_or(&self.initial)
    }

    /// Number of Refine/Rerank transitions.
    pub fn steps(&self) -> usize {
        self.transitions
            .iter()
            .filter(|t| !t.decision.is_stop())
            .count()
    }

    pub fn total_output_tokens(&self) -> u64 {
        self.transitions.iter().map(|t| t.output_tokens).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(q: &str, ids: &[&str]) -> ReasoningState {
        let docs = RankedList::new(
            ids.iter().map(|s| s.to_string()).collect(),
            ListSource::InitialRetrieval,
        )
        .unwrap();
        ReasoningState::initial(q, docs, DEFAULT_MAX_LIST_SIZE).unwrap()
    }

    #[test]
    fn equivalence_examples() {
        assert!(state_equivalent(&st("x", &["d1", "d2"]), &st("x", &["d1", "d2"])));
        assert!(!state_equivalent(&st("x", &["d1", "d2"]), &st("y", &["d1", "d2"])));
        assert!(!state_equivalent(&st("x", &["d1", "d2"]), &st("x", &["d2", "d1"])));
    }

    #[test]
    fn equivalence_trims_query_whitespace() {
        assert!(state_equivalent(&st("  x\n", &["d1"]), &st("x", &["d1"])));
        assert!(!state_equivalent(&st("x y", &["d1"]), &st("x  y", &["d1"])));
    }

    #[test]
    fn equivalence_ignores_step_and_source() {
        let a = st("x", &["d1"]);
        let docs = RankedList::new(vec!["d1".into()], ListSource::Rerank).unwrap();
        let b = ReasoningState::new("x", docs, 3, DEFAULT_MAX_LIST_SIZE).unwrap();
        assert!(state_equivalent(&a, &b));
    }

    #[test]
    fn ranked_list_rejects_duplicates_and_bad_ids() {
        let dup = RankedList::new(vec!["a".into(), "a".into()], ListSource::Rerank);
        assert_eq!(dup, Err(StateError::DuplicateEntry("a".into())));
        let nl = RankedList::new(vec!["a\nb".into()], ListSource::Rerank);
        assert!(matches!(nl, Err(StateError::NewlineInDocId(_))));
        assert_eq!(
            RankedList::new(vec![String::new()], ListSource::Rerank),
            Err(StateError::EmptyDocId)
        );
    }

    #[test]
    fn state_rejects_empty_query_and_oversized_list() {
        let docs = RankedList::empty(ListSource::InitialRetrieval);
        assert_eq!(
            ReasoningState::initial("  ", docs.clone(), 10),
            Err(StateError::EmptyQuery)
        );
        let docs = RankedList::new(vec!["a".into(), "b".into()], ListSource::RefineMerge).unwrap();
        assert_eq!(
            ReasoningState::new("q", docs, 1, 1),
            Err(StateError::ListTooLong { len: 2, max: 1 })
        );
    }

    #[test]
    fn step_zero_is_tagged_initial_retrieval() {
        let docs = RankedList::new(vec!["a".into()], ListSource::Rerank).unwrap();
        let s = ReasoningState::new("q", docs, 0, 10).unwrap();
        assert_eq!(s.docs().source(), ListSource::InitialRetrieval);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_state() -> impl Strategy<Value = ReasoningState> {
            (
                prop::sample::select(vec!["x", "y", " x", "z"]),
                prop::sample::subsequence(vec!["d1", "d2", "d3"], 0..=3).prop_shuffle(),
            )
                .prop_map(|(q, ids)| st(q, &ids))
        }

        proptest! {
            #[test]
            fn equivalence_is_an_equivalence_relation(a in arb_state(), b in arb_state(), c in arb_state()) {
                prop_assert!(state_equivalent(&a, &a));
                prop_assert_eq!(state_equivalent(&a, &b), state_equivalent(&b, &a));
                if state_equivalent(&a, &b) && state_equivalent(&b, &c) {
                    prop_assert!(state_equivalent(&a, &c));
                }
            }
        }
    }
}
