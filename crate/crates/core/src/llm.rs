//! Chat-model backends: a chat-completions HTTP client and a scripted backend
//! for offline runs, both reporting generated output tokens.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 1024;
pub const API_KEY_ENV: &str = "SMR_API_KEY";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint rejected request ({status}): {body}")]
    Configuration { status: u16, body: String },
    #[error("unexpected response body: {0}")]
    Protocol(String),
    #[error("script exhausted after {consumed} responses")]
    ScriptExhausted { consumed: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    pub fn new(system_text: impl Into<String>, user_text: impl Into<String>, temperature: f64) -> Self {
        Self {
            system_text: system_text.into(),
            user_text: user_text.into(),
            temperature,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 1]",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub output_tokens: u64,
}

pub trait ChatBackend: Send {
    fn chat(&mut self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn chat(&mut self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).chat(request)
    }
}

/// Counts maximal runs of non-whitespace characters.
pub fn count_fallback_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptStep {
    pub text: String,
    /// Overrides the whitespace count when set.
    pub output_tokens: Option<u64>,
}

impl From<&str> for ScriptStep {
    fn from(text: &str) -> Self {
        Self {
            text: text.to_string(),
            output_tokens: None,
        }
    }
}

impl From<String> for ScriptStep {
    fn from(text: String) -> Self {
        Self {
            text,
            output_tokens: None,
        }
    }
}

/// Replays canned responses in order, one per call.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    steps: Vec<ScriptStep>,
    cursor: usize,
    seen: Vec<ChatRequest>,
}

impl ScriptedBackend {
    pub fn new<I, S>(steps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<ScriptStep>,
    {
        Self {
            steps: steps.into_iter().map(Into::into).collect(),
            cursor: 0,
            seen: Vec::new(),
        }
    }

    pub fn consumed(&self) -> usize {
        self.cursor
    }

    pub fn remaining(&self) -> usize {
        self.steps.len() - self.cursor
    }

    /// Requests received so far, in order.
    pub fn requests(&self) -> &[ChatRequest] {
        &self.seen
    }
}

impl ChatBackend for ScriptedBackend {
    fn chat(&mut self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let step = self
            .steps
            .get(self.cursor)
            .ok_or(LlmError::ScriptExhausted {
                consumed: self.cursor,
            })?;
        self.cursor += 1;
        self.seen.push(request.clone());
        Ok(ChatResponse {
            output_tokens: step
                .output_tokens
                .unwrap_or_else(|| count_fallback_tokens(&step.text)),
            text: step.text.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    /// Retries after the first attempt, for transport faults only.
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key,
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }
}

/// Client for chat-completions compatible endpoints.
#[derive(Clone)]
pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

/// The JSON body sent to the endpoint.
pub fn chat_payload(model: &str, request: &ChatRequest) -> serde_json::Value {
    json!({
        "model": model,
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
        "messages": [
            { "role": "system", "content": request.system_text },
            { "role": "user", "content": request.user_text },
        ],
    })
}

/// Extracts text and completion-token usage from a chat-completions body.
pub fn parse_chat_body(body: &serde_json::Value) -> Result<ChatResponse, LlmError> {
    let message = body
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .ok_or_else(|| LlmError::Protocol("missing choices[0].message".into()))?;
    // A null or absent content is an empty generation, which the policy retries.
    let text = message
        .get("content")
        .and_then(|c| c.as_str())
        .unwrap_or_default()
        .to_string();
    let output_tokens = body
        .get("usage")
        .and_then(|u| u.get("completion_tokens"))
        .and_then(|t| t.as_u64())
        .unwrap_or_else(|| count_fallback_tokens(&text));
    Ok(ChatResponse {
        text,
        output_tokens,
    })
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LlmError::InvalidRequest(e.to_string()))?;
        Ok(Self { config, client })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    /// Sends a one-token request to confirm the endpoint answers.
    pub fn preflight(&mut self) -> Result<(), LlmError> {
        let mut req = ChatRequest::new("", "ping", 0.0);
        req.max_output_tokens = 1;
        self.chat(&req).map(|_| ())
    }

    fn send_once(&self, payload: &serde_json::Value) -> Result<serde_json::Value, Attempt> {
        let mut builder = self.client.post(&self.config.url).json(payload);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| Attempt::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Transient(format!("endpoint returned {status}")));
        }
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(Attempt::Fatal(LlmError::Configuration {
                status: status.as_u16(),
                body,
            }));
        }
        resp.json::<serde_json::Value>()
            .map_err(|e| Attempt::Fatal(LlmError::Protocol(e.to_string())))
    }
}

enum Attempt {
    Transient(String),
    Fatal(LlmError),
}

impl ChatBackend for HttpBackend {
    fn chat(&mut self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let payload = chat_payload(&self.config.model, request);
        let mut backoff = self.config.initial_backoff;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.send_once(&payload) {
                Ok(body) => return parse_chat_body(&body),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(message)) => {
                    if attempt > self.config.max_retries {
                        return Err(LlmError::Transport {
                            attempts: attempt,
                            message,
                        });
                    }
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
    }
}
