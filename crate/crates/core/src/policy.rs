//! Prompt-driven action selection.
//!
//! The policy renders the decision prompt for the current state, asks the
//! model for exactly one action in JSON, and retries malformed answers at a
//! temperature raised by a fixed increment per attempt.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::llm::{ChatBackend, ChatRequest, LlmError, DEFAULT_MAX_OUTPUT_TOKENS};
use crate::retrieval::DocStore;
use crate::state::{Decision, ReasoningState};

/// Decision prompt shipped with the crate.
pub const DEFAULT_POLICY_PROMPT: &str = include_str!("../assets/policy_prompt.txt");

const TEMPERATURE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub base_temperature: f64,
    pub temperature_increment: f64,
    pub max_attempts: u32,
    pub doc_snippet_chars: usize,
    pub max_output_tokens: u32,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            base_temperature: 0.0,
            temperature_increment: 0.1,
            max_attempts: 6,
            doc_snippet_chars: 2000,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.base_temperature) {
            return bad(format!("base_temperature {} outside [0, 1]", self.base_temperature));
        }
        if self.temperature_increment.is_nan() || self.temperature_increment < 0.0 {
            return bad("temperature_increment must be non-negative".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        if self.doc_snippet_chars == 0 {
            return bad("doc_snippet_chars must be positive".into());
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be positive".into());
        }
        let last = self.temperature_for_attempt(self.max_attempts - 1);
        if last > 1.0 + TEMPERATURE_SLACK {
            return bad(format!(
                "escalation reaches temperature {last} after {} attempts",
                self.max_attempts
            ));
        }
        Ok(())
    }

    /// Temperature of 0-based attempt `i`: `base + i * increment`.
    pub fn temperature_for_attempt(&self, i: u32) -> f64 {
        self.base_temperature + f64::from(i) * self.temperature_increment
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error("document {0:?} is not in the document store")]
    MissingDocument(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("cannot read prompt file: {0}")]
    PromptFile(#[from] std::io::Error),
}

/// A malformed policy answer. Every variant means "retry hotter".
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("no JSON object found")]
    NoJsonObject,
    #[error("missing or non-string \"action\"")]
    MissingAction,
    #[error("unknown action {0:?}")]
    UnknownAction(String),
    #[error("missing or empty field {0:?}")]
    MissingPayload(&'static str),
    #[error("field \"reranked\" must contain only strings")]
    NonStringId,
}

/// Returns the first balanced `{...}` span of `raw` that parses as a JSON
/// object. Prose and code fences around it are ignored.
pub fn extract_json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    let bytes = raw.as_bytes();
    let mut start = 0;
    while let Some(off) = raw[start..].find('{') {
        let open = start + off;
        if let Some(close) = balanced_end(bytes, open) {
            if let Ok(Value::Object(map)) = serde_json::from_str(&raw[open..=close]) {
                return Some(map);
            }
        }
        start = open + 1;
    }
    None
}

fn balanced_end(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn normalize_action(a: &str) -> String {
    a.trim().trim_end_matches('.').trim().to_lowercase()
}

pub fn parse_decision(raw: &str) -> Result<Decision, ParseError> {
    let obj = extract_json_object(raw).ok_or(ParseError::NoJsonObject)?;
    let action = obj
        .get("action")
        .and_then(Value::as_str)
        .ok_or(ParseError::MissingAction)?;
    let reason = obj.get("reason").and_then(Value::as_str).map(str::to_string);
    match normalize_action(action).as_str() {
        "refine query" => {
            let q = obj
                .get("refined_query")
                .and_then(Value::as_str)
                .filter(|q| !q.trim().is_empty())
                .ok_or(ParseError::MissingPayload("refined_query"))?;
            Ok(Decision::Refine {
                refined_query: q.to_string(),
                reason,
            })
        }
        "re-rank" => {
            let arr = obj
                .get("reranked")
                .and_then(Value::as_array)
                .filter(|a| !a.is_empty())
                .ok_or(ParseError::MissingPayload("reranked"))?;
            let ids = arr
                .iter()
                .map(|v| v.as_str().map(str::to_string))
                .collect::<Option<Vec<_>>>()
                .ok_or(ParseError::NonStringId)?;
            Ok(Decision::Rerank {
                reranked_ids: ids,
                reason,
            })
        }
        "stop" => Ok(Decision::Stop),
        _ => Err(ParseError::UnknownAction(action.to_string())),
    }
}

/// Serializes a decision in the prompt's output format.
pub fn decision_to_json(decision: &Decision) -> String {
    let mut v = match decision {
        Decision::Refine { refined_query, .. } => {
            json!({"action": "refine query", "refined_query": refined_query})
        }
        Decision::Rerank { reranked_ids, .. } => {
            json!({"action": "re-rank", "reranked": reranked_ids})
        }
        Decision::Stop => json!({"action": "stop"}),
    };
    if let Some(r) = decision.reason() {
        v["reason"] = json!(r);
    }
    v.to_string()
}

fn truncate_chars(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((idx, _)) => &s[..idx],
        None => s,
    }
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

/// Renders the user message: the current query and `(docid, contents)` pairs
/// in rank order, contents cut to `snippet_chars` characters.
pub fn render_user_text<S: DocStore + ?Sized>(
    state: &ReasoningState,
    docs: &S,
    snippet_chars: usize,
) -> Result<String, PolicyError> {
    let mut out = String::new();
    out.push_str("{\n");
    out.push_str(&format!("\"query\": {},\n", quote(state.query())));
    let entries = state.docs().entries();
    if entries.is_empty() {
        out.push_str("\"retrieved\": []\n");
    } else {
        out.push_str("\"retrieved\": [\n");
        for (i, id) in entries.iter().enumerate() {
            let doc = docs
                .document(id)
                .ok_or_else(|| PolicyError::MissingDocument(id.clone()))?;
            let sep = if i + 1 < entries.len() { "," } else { "" };
            out.push_str(&format!(
                "    ({}, {}){sep}\n",
                quote(id),
                quote(truncate_chars(&doc.text, snippet_chars))
            ));
        }
        out.push_str("]\n");
    }
    out.push('}');
    Ok(out)
}

/// Result of an escalating retry loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Escalation<T> {
    /// `None` when every attempt was malformed.
    pub value: Option<T>,
    pub output_tokens: u64,
    /// Temperature of each attempt, in order.
    pub temperatures: Vec<f64>,
    pub failures: Vec<String>,
}

impl<T> Escalation<T> {
    pub fn attempts(&self) -> u32 {
        self.temperatures.len() as u32
    }

    pub fn last_temperature(&self) -> f64 {
        self.temperatures.last().copied().unwrap_or_default()
    }
}

/// Calls the backend at `base, base + inc, ...` until `parse` accepts an
/// answer or attempts run out. Tokens from rejected answers are counted.
/// Transport errors abort immediately.
pub fn escalate<T, E, B, F>(
    backend: &mut B,
    config: &PolicyConfig,
    system_text: &str,
    user_text: &str,
    mut parse: F,
) -> Result<Escalation<T>, LlmError>
where
    B: ChatBackend + ?Sized,
    E: std::fmt::Display,
    F: FnMut(&str) -> Result<T, E>,
{
    let mut out = Escalation {
        value: None,
        output_tokens: 0,
        temperatures: Vec::new(),
        failures: Vec::new(),
    };
    for i in 0..config.max_attempts {
        let temperature = config.temperature_for_attempt(i).min(1.0);
        let request = ChatRequest {
            system_text: system_text.to_string(),
            user_text: user_text.to_string(),
            temperature,
            max_output_tokens: config.max_output_tokens,
        };
        let response = backend.chat(&request)?;
        out.output_tokens += response.output_tokens;
        out.temperatures.push(temperature);
        match parse(&response.text) {
            Ok(v) => {
                out.value = Some(v);
                break;
            }
            Err(e) => out.failures.push(e.to_string()),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutcome {
    pub decision: Decision,
    pub output_tokens: u64,
    pub temperature_used: f64,
    pub attempts: u32,
    /// Every attempt was malformed and the decision is the fallback Stop.
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct Policy {
    config: PolicyConfig,
    system_prompt: String,
}

impl Policy {
    pub fn new(config: PolicyConfig) -> Result<Self, PolicyError> {
        config.validate()?;
        Ok(Self {
            config,
            system_prompt: DEFAULT_POLICY_PROMPT.to_string(),
        })
    }

    pub fn with_prompt(mut self, system_prompt: impl Into<String>) -> Self {
        self.system_prompt = system_prompt.into();
        self
    }

    pub fn with_prompt_file(self, path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path)?;
        Ok(self.with_prompt(text))
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn system_prompt(&self) -> &str {
        &self.system_prompt
    }

    /// Returns `(system_text, user_text)` for the state.
    pub fn render<S: DocStore + ?Sized>(
        &self,
        state: &ReasoningState,
        docs: &S,
    ) -> Result<(String, String), PolicyError> {
        let user = render_user_text(state, docs, self.config.doc_snippet_chars)?;
        Ok((self.system_prompt.clone(), user))
    }

    pub fn decide<S, B>(
        &self,
        state: &ReasoningState,
        docs: &S,
        backend: &mut B,
    ) -> Result<PolicyOutcome, PolicyError>
    where
        S: DocStore + ?Sized,
        B: ChatBackend + ?Sized,
    {
        let (system, user) = self.render(state, docs)?;
        let esc = escalate(backend, &self.config, &system, &user, parse_decision)?;
        let attempts = esc.attempts();
        let temperature_used = esc.last_temperature();
        let (decision, fallback) = match esc.value {
            Some(d) => (d, false),
            None => (Decision::Stop, true),
        };
        Ok(PolicyOutcome {
            decision,
            output_tokens: esc.output_tokens,
            temperature_used,
            attempts,
            fallback,
        })
    }
}
