//! State updates for Refine and Rerank.

use std::collections::HashSet;

use thiserror::Error;

use crate::retrieval::{RetrievalError, Retriever};
use crate::state::{ListSource, RankedList, ReasoningState, SanitizeReport, StateError};

#[derive(Debug, Error)]
pub enum ActionError {
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    State(#[from] StateError),
}

/// Appends retrieved ids not already in `current`, in retriever order, up to
/// `max_list_size` entries. Existing entries are never removed.
pub fn merge_retrieved(
    current: &RankedList,
    newly_retrieved: &RankedList,
    max_list_size: usize,
) -> RankedList {
    let mut seen: HashSet<&str> = current.entries().iter().map(String::as_str).collect();
    let mut entries: Vec<String> = current.entries().to_vec();
    for id in newly_retrieved.entries() {
        if entries.len() >= max_list_size {
            break;
        }
        if seen.insert(id.as_str()) {
            entries.push(id.clone());
        }
    }
    entries.truncate(max_list_size);
    RankedList::from_unique(entries, ListSource::RefineMerge)
}

/// Replaces the query, retrieves once with it, and merges the results.
pub fn exec_refine<R: Retriever + ?Sized>(
    state: &ReasoningState,
    refined_query: &str,
    retriever: &R,
    k: usize,
    max_list_size: usize,
) -> Result<ReasoningState, ActionError> {
    if refined_query.trim().is_empty() {
        return Err(StateError::EmptyQuery.into());
    }
    let retrieved = retriever.retrieve(refined_query, k)?;
    let docs = merge_retrieved(state.docs(), &retrieved, max_list_size);
    Ok(ReasoningState::new(
        refined_query,
        docs,
        state.step() + 1,
        max_list_size,
    )?)
}

/// Turns an arbitrary proposal into a permutation of `current`.
///
/// Ids absent from `current` and repeated ids are dropped (first occurrence
/// wins), then every id the proposal left out is appended in its original
/// order.
pub fn sanitize_rerank(current: &RankedList, proposed_ids: &[String]) -> (RankedList, SanitizeReport) {
    let known: HashSet<&str> = current.entries().iter().map(String::as_str).collect();
    let mut placed: HashSet<&str> = HashSet::with_capacity(known.len());
    let mut entries = Vec::with_capacity(current.len());
    let mut report = SanitizeReport::default();

    for id in proposed_ids {
        if !known.contains(id.as_str()) {
            report.dropped_ids.push(id.clone());
        } else if placed.insert(id.as_str()) {
            entries.push(id.clone());
        }
    }
    for id in current.entries() {
        if !placed.contains(id.as_str()) {
            entries.push(id.clone());
            report.reappended_ids.push(id.clone());
        }
    }
    (RankedList::from_unique(entries, ListSource::Rerank), report)
}

/// Reorders the list; the query is carried over untouched.
pub fn exec_rerank(state: &ReasoningState, proposed_ids: &[String]) -> (ReasoningState, SanitizeReport) {
    let (docs, report) = sanitize_rerank(state.docs(), proposed_ids);
    let next = ReasoningState::new(state.query(), docs, state.step() + 1, usize::MAX)
        .expect("a permutation of a valid state is valid");
    (next, report)
}
