//! The reasoning loop.
//!
//! Each trajectory starts from `(query, top-k retrieval)` and repeatedly asks
//! the policy for an action until one of four things happens: the policy says
//! Stop, the policy never produces a valid answer, an action leaves the state
//! unchanged, or `max_steps` Refine/Rerank transitions have been taken.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{exec_refine, exec_rerank, ActionError};
use crate::llm::{ChatBackend, LlmError};
use crate::policy::{Policy, PolicyConfig, PolicyError};
use crate::retrieval::{RetrievalError, Retriever};
use crate::state::{
    state_equivalent, ActionKind, Decision, ReasoningState, StateError, StopCause, Trajectory,
    Transition, DEFAULT_MAX_LIST_SIZE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub k: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub max_list_size: usize,
    pub policy: PolicyConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            k: 10,
            max_steps: 16,
            batch_size: 8,
            max_list_size: DEFAULT_MAX_LIST_SIZE,
            policy: PolicyConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_string()));
        if self.k == 0 {
            return bad("k must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.max_list_size < self.k {
            return bad("max_list_size must be at least k");
        }
        self.policy.validate()?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("malformed trace at line {line}: {message}")]
    Trace { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ActionError> for EngineError {
    fn from(e: ActionError) -> Self {
        match e {
            ActionError::Retrieval(e) => EngineError::Retrieval(e),
            ActionError::State(e) => EngineError::State(e),
        }
    }
}

/// A trajectory that aborted on a retriever or backend error.
#[derive(Debug)]
pub struct TrajectoryFailure {
    pub query_id: String,
    pub query: String,
    pub error: EngineError,
    /// Transitions completed before the error.
    pub completed: Vec<Transition>,
}

impl TrajectoryFailure {
    pub fn output_tokens(&self) -> u64 {
        self.completed.iter().map(|t| t.output_tokens).sum()
    }
}

pub type TrajectoryResult = Result<Trajectory, TrajectoryFailure>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct Engine {
    config: EngineConfig,
    policy: Policy,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let policy = Policy::new(config.policy.clone())?;
        Ok(Self { config, policy })
    }

    /// Replaces the decision prompt.
    pub fn with_policy_prompt(mut self, prompt: impl Into<String>) -> Self {
        self.policy = self.policy.with_prompt(prompt);
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn run_trajectory<R, B>(
        &self,
        query_id: &str,
        query: &str,
        retriever: &R,
        backend: &mut B,
    ) -> TrajectoryResult
    where
        R: Retriever + ?Sized,
        B: ChatBackend + ?Sized,
    {
        let mut transitions = Vec::new();
        match self.drive(query, retriever, backend, &mut transitions) {
            Ok((initial, stop_cause)) => Ok(Trajectory {
                query_id: query_id.to_string(),
                initial,
                transitions,
                stop_cause,
            }),
            Err(error) => Err(TrajectoryFailure {
                query_id: query_id.to_string(),
                query: query.to_string(),
                error,
                completed: transitions,
            }),
        }
    }

    fn drive<R, B>(
        &self,
        query: &str,
        retriever: &R,
        backend: &mut B,
        transitions: &mut Vec<Transition>,
    ) -> Result<(ReasoningState, StopCause), EngineError>
    where
        R: Retriever + ?Sized,
        B: ChatBackend + ?Sized,
    {
        let cfg = &self.config;
        if query.trim().is_empty() {
            return Err(StateError::EmptyQuery.into());
        }
        let initial_docs = retriever.retrieve(query, cfg.k)?;
        let initial = ReasoningState::initial(query, initial_docs, cfg.max_list_size)?;
        let mut state = initial.clone();
        let mut steps = 0usize;

        loop {
            if steps >= cfg.max_steps {
                return Ok((initial, StopCause::StepCap));
            }
            let outcome = self.policy.decide(&state, retriever, backend)?;
            let (post_state, sanitize) = match &outcome.decision {
                Decision::Stop => {
                    transitions.push(Transition {
                        decision: Decision::Stop,
                        pre_state: state.clone(),
                        post_state: state,
                        output_tokens: outcome.output_tokens,
                        policy_temperature_used: outcome.temperature_used,
                        attempts: outcome.attempts,
                        sanitize: None,
                    });
                    let cause = if outcome.fallback {
                        StopCause::PolicyFailureFallback
                    } else {
                        StopCause::PolicyStop
                    };
                    return Ok((initial, cause));
                }
                Decision::Refine { refined_query, .. } => (
                    exec_refine(&state, refined_query, retriever, cfg.k, cfg.max_list_size)?,
                    None,
                ),
                Decision::Rerank { reranked_ids, .. } => {
                    let (next, report) = exec_rerank(&state, reranked_ids);
                    (next, Some(report))
                }
            };
            steps += 1;
            let equivalent = state_equivalent(&state, &post_state);
            transitions.push(Transition {
                decision: outcome.decision,
                pre_state: state,
                post_state: post_state.clone(),
                output_tokens: outcome.output_tokens,
                policy_temperature_used: outcome.temperature_used,
                attempts: outcome.attempts,
                sanitize,
            });
            if equivalent {
                return Ok((initial, StopCause::EquivalenceStop));
            }
            state = post_state;
        }
    }

    /// Runs every query with at most `batch_size` trajectories in flight.
    /// Results come back in input order; failures are per entry.
    pub fn run_batch<R, B, F>(&self, queries: &[Query], retriever: &R, backend_factory: F) -> Vec<TrajectoryResult>
    where
        R: Retriever + ?Sized,
        B: ChatBackend,
        F: Fn(&Query) -> Result<B, LlmError> + Sync,
    {
        let slots: Vec<Mutex<Option<TrajectoryResult>>> =
            queries.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.batch_size.min(queries.len());

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(q) = queries.get(i) else { break };
                    let result = match backend_factory(q) {
                        Ok(mut backend) => self.run_trajectory(&q.query_id, &q.text, retriever, &mut backend),
                        Err(e) => Err(TrajectoryFailure {
                            query_id: q.query_id.clone(),
                            query: q.text.clone(),
                            error: e.into(),
                            completed: Vec::new(),
                        }),
                    };
                    *slots[i].lock().expect("slot lock") = Some(result);
                });
            }
        });

        slots
            .into_iter()
            .map(|s| s.into_inner().expect("slot lock").expect("every query was run"))
            .collect()
    }
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum TraceRecord {
    Transition(TransitionRecord),
    Summary(SummaryRecord),
    Failure(FailureRecord),
}

impl TraceRecord {
    pub fn query_id(&self) -> &str {
        match self {
            TraceRecord::Transition(r) => &r.query_id,
            TraceRecord::Summary(r) => &r.query_id,
            TraceRecord::Failure(r) => &r.query_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub query_id: String,
    /// 1-based position of the transition in its trajectory.
    pub step: usize,
    pub action: ActionKind,
    pub query: String,
    pub doc_ids: Vec<String>,
    pub reason: Option<String>,
    pub output_tokens: u64,
    pub temperature: f64,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropped_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reappended_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_cause: Option<StopCause>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub query_id: String,
    pub initial_query: String,
    pub initial_doc_ids: Vec<String>,
    pub final_query: String,
    pub final_doc_ids: Vec<String>,
    /// Refine/Rerank transitions.
    pub steps: usize,
    pub transitions: usize,
    pub total_output_tokens: u64,
    pub stop_cause: StopCause,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub query_id: String,
    pub query: String,
    pub error: String,
    pub completed_transitions: usize,
    pub output_tokens: u64,
}

fn transition_record(query_id: &str, index: usize, t: &Transition, stop_cause: Option<StopCause>) -> TraceRecord {
    TraceRecord::Transition(TransitionRecord {
        query_id: query_id.to_string(),
        step: index + 1,
        action: t.decision.kind(),
        query: t.post_state.query().to_string(),
        doc_ids: t.post_state.docs().entries().to_vec(),
        reason: t.decision.reason().map(str::to_string),
        output_tokens: t.output_tokens,
        temperature: t.policy_temperature_used,
        attempts: t.attempts,
        dropped_ids: t.sanitize.as_ref().map(|s| s.dropped_ids.clone()),
        reappended_ids: t.sanitize.as_ref().map(|s| s.reappended_ids.clone()),
        stop_cause,
    })
}

pub fn trace_records(trajectory: &Trajectory) -> Vec<TraceRecord> {
    let n = trajectory.transitions.len();
    let mut out: Vec<TraceRecord> = trajectory
        .transitions
        .iter()
        .enumerate()
        .map(|(i, t)| {
            transition_record(&trajectory.query_id, i, t, (i + 1 == n).then_some(trajectory.stop_cause))
        })
        .collect();
    let last = trajectory.final_state();
    out.push(TraceRecord::Summary(SummaryRecord {
        query_id: trajectory.query_id.clone(),
        initial_query: trajectory.initial.query().to_string(),
        initial_doc_ids: trajectory.initial.docs().entries().to_vec(),
        final_query: last.query().to_string(),
        final_doc_ids: last.docs().entries().to_vec(),
        steps: trajectory.steps(),
        transitions: n,
        total_output_tokens: trajectory.total_output_tokens(),
        stop_cause: trajectory.stop_cause,
    }));
    out
}

fn write_record<W: Write, T: Serialize>(sink: &mut W, rec: &T) -> Result<(), EngineError> {
    let line = serde_json::to_string(rec).map_err(std::io::Error::other)?;
    sink.write_all(line.as_bytes())?;
    sink.write_all(b"\n")?;
    Ok(())
}

/// Writes one JSON line per transition and a closing summary line.
pub fn emit_trace<W: Write>(trajectory: &Trajectory, sink: &mut W) -> Result<(), EngineError> {
    for rec in trace_records(trajectory) {
        write_record(sink, &rec)?;
    }
    Ok(())
}

/// Trace lines for a batch result: transitions + summary, or a failure line
/// (preceded by whatever transitions finished).
pub fn emit_result_trace<W: Write>(result: &TrajectoryResult, sink: &mut W) -> Result<(), EngineError> {
    match result {
        Ok(t) => emit_trace(t, sink),
        Err(f) => {
            for (i, t) in f.completed.iter().enumerate() {
                write_record(sink, &transition_record(&f.query_id, i, t, None))?;
            }
            write_record(
                sink,
                &TraceRecord::Failure(FailureRecord {
                    query_id: f.query_id.clone(),
                    query: f.query.clone(),
                    error: f.error.to_string(),
                    completed_transitions: f.completed.len(),
                    output_tokens: f.output_tokens(),
                }),
            )
        }
    }
}

/// Parses a trace file; blank lines are skipped.
pub fn read_trace<R: BufRead>(reader: R) -> Result<Vec<TraceRecord>, EngineError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| EngineError::Trace {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Final ranking per query rebuilt from trace records alone: the last
/// transition's list, or the initial list when no transition was recorded.
pub fn replay_final_rankings(records: &[TraceRecord]) -> Vec<(String, Vec<String>)> {
    let mut out: Vec<(String, Vec<String>)> = Vec::new();
    let mut last: Option<(String, Vec<String>)> = None;
    for rec in records {
        match rec {
            TraceRecord::Transition(t) => last = Some((t.query_id.clone(), t.doc_ids.clone())),
            TraceRecord::Summary(s) => {
                let ranking = match last.take() {
                    Some((qid, docs)) if qid == s.query_id => docs,
                    _ => s.initial_doc_ids.clone(),
                };
                out.push((s.query_id.clone(), ranking));
            }
            TraceRecord::Failure(_) => last = None,
        }
    }
    out
}

/// One line of a run file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub query_id: String,
    pub final_query: String,
    pub ranked_doc_ids: Vec<String>,
    pub stop_cause: Option<StopCause>,
    pub steps: usize,
    pub output_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    pub fn from_result(result: &TrajectoryResult) -> Self {
        match result {
            Ok(t) => {
                let last = t.final_state();
                Self {
                    query_id: t.query_id.clone(),
                    final_query: last.query().to_string(),
                    ranked_doc_ids: last.docs().entries().to_vec(),
                    stop_cause: Some(t.stop_cause),
                    steps: t.steps(),
                    output_tokens: t.total_output_tokens(),
                    error: None,
                }
            }
            Err(f) => Self {
                query_id: f.query_id.clone(),
                final_query: f.query.clone(),
                ranked_doc_ids: Vec::new(),
                stop_cause: None,
                steps: f.completed.iter().filter(|t| !t.decision.is_stop()).count(),
                output_tokens: f.output_tokens(),
                error: Some(f.error.to_string()),
            },
        }
    }
}

pub fn write_run_file<W: Write>(results: &[TrajectoryResult], sink: &mut W) -> Result<(), EngineError> {
    for r in results {
        write_record(sink, &RunRecord::from_result(r))?;
    }
    Ok(())
}

pub fn read_run_file<R: BufRead>(reader: R) -> Result<Vec<RunRecord>, EngineError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EngineError::Trace {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct QueryLine {
    #[serde(default)]
    query_id: Option<serde_json::Value>,
    text: String,
}

/// Reads queries as JSONL `{query_id, text}` or as plain text, one per line.
/// The format is chosen from the first non-blank line; ids default to the
/// 0-based position among non-blank lines.
pub fn read_queries<R: BufRead>(reader: R) -> Result<Vec<Query>, EngineError> {
    let lines: Vec<(usize, String)> = reader
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)))
        .collect::<Result<_, _>>()?;
    let lines: Vec<(usize, String)> = lines.into_iter().filter(|(_, l)| !l.trim().is_empty()).collect();
    let jsonl = lines
        .first()
        .map(|(_, l)| l.trim_start().starts_with('{'))
        .unwrap_or(false);

    let mut out = Vec::with_capacity(lines.len());
    for (pos, (lineno, line)) in lines.into_iter().enumerate() {
        if jsonl {
            let q: QueryLine = serde_json::from_str(&line).map_err(|e| EngineError::Trace {
                line: lineno,
                message: e.to_string(),
            })?;
            let query_id = match q.query_id {
                None | Some(serde_json::Value::Null) => pos.to_string(),
                Some(serde_json::Value::String(s)) => s,
                Some(serde_json::Value::Number(n)) => n.to_string(),
                Some(other) => {
                    return Err(EngineError::Trace {
                        line: lineno,
                        message: format!("query_id must be a string or number, got {other}"),
                    })
                }
            };
            out.push(Query { query_id, text: q.text });
        } else {
            out.push(Query {
                query_id: pos.to_string(),
                text: line.trim().to_string(),
            });
        }
    }
    Ok(out)
}

pub fn read_queries_file(path: &Path) -> Result<Vec<Query>, EngineError> {
    let f = std::fs::File::open(path)?;
    read_queries(std::io::BufReader::new(f))
}
