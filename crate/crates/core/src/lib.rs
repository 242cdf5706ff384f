//! State-machine reasoning for retrieval.
//!
//! A query and its retrieved documents form a state. A prompt-driven policy
//! picks one of three actions per step (refine the query, rerank the list, or
//! stop) and the engine applies it, stopping early when a step changes
//! nothing or when the step budget runs out.

pub mod actions;
pub mod engine;
pub mod evalx;
pub mod llm;
pub mod policy;
pub mod retrieval;
pub mod state;

pub use actions::{exec_refine, exec_rerank, merge_retrieved, sanitize_rerank};
pub use engine::{Engine, EngineConfig, EngineError, Query, RunRecord, TraceRecord};
pub use llm::{ChatBackend, ChatRequest, ChatResponse, HttpBackend, HttpConfig, LlmError, ScriptedBackend};
pub use policy::{parse_decision, Policy, PolicyConfig};
pub use retrieval::{CorpusIndex, DenseStore, DocStore, Retriever, TokenizerConfig};
pub use state::{
    state_equivalent, ActionKind, Decision, Document, ListSource, RankedList, ReasoningState,
    SanitizeReport, StopCause, Trajectory, Transition,
};
