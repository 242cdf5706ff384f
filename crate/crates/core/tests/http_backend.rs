//! Chat-completions client against a local mock endpoint.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::Value;
use smr_core::llm::{ChatBackend, ChatRequest, HttpBackend, HttpConfig, LlmError};

struct Mock {
    url: String,
    bodies: Arc<Mutex<Vec<Value>>>,
    auth: Arc<Mutex<Vec<Option<String>>>>,
}

/// Serves the given `(status, body)` replies in order, one per connection.
fn mock(replies: Vec<(u16, String)>) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let auth = Arc::new(Mutex::new(Vec::new()));
    let (b, a) = (bodies.clone(), auth.clone());
    thread::spawn(move || {
        for (status, reply) in replies {
            let Ok((mut stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut authz = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                let lower = l.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    authz = Some(l["authorization:".len()..].trim().to_string());
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            b.lock().unwrap().push(serde_json::from_slice(&body).unwrap_or(Value::Null));
            a.lock().unwrap().push(authz);
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    Mock { url, bodies, auth }
}

fn backend(url: &str) -> HttpBackend {
    let mut cfg = HttpConfig::new(url, "test-model", Some("sekret".into()));
    cfg.initial_backoff = Duration::from_millis(1);
    cfg.timeout = Duration::from_secs(5);
    HttpBackend::new(cfg).unwrap()
}

fn ok_body(text: &str, tokens: Option<u64>) -> String {
    let mut v = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]});
    if let Some(t) = tokens {
        v["usage"] = serde_json::json!({"completion_tokens": t, "prompt_tokens": 999});
    }
    v.to_string()
}

#[test]
fn sends_payload_and_reads_usage() {
    let m = mock(vec![(200, ok_body("{\"action\": \"stop\"}", Some(5)))]);
    let mut b = backend(&m.url);
    let r = b.chat(&ChatRequest::new("system prompt", "user text", 0.0)).unwrap();
    assert_eq!(r.text, "{\"action\": \"stop\"}");
    assert_eq!(r.output_tokens, 5);
    let body = &m.bodies.lock().unwrap()[0];
    assert_eq!(body["temperature"], serde_json::json!(0.0));
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["max_tokens"], 1024);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "user text");
    assert_eq!(m.auth.lock().unwrap()[0].as_deref(), Some("Bearer sekret"));
}

#[test]
fn falls_back_to_whitespace_count_without_usage() {
    let m = mock(vec![(200, ok_body("one two three", None))]);
    let r = backend(&m.url).chat(&ChatRequest::new("", "u", 0.3)).unwrap();
    assert_eq!(r.output_tokens, 3);
}

#[test]
fn retries_transient_failures() {
    let m = mock(vec![
        (500, "{}".into()),
        (503, "{}".into()),
        (200, ok_body("fine", Some(1))),
    ]);
    let r = backend(&m.url).chat(&ChatRequest::new("", "u", 0.0)).unwrap();
    assert_eq!(r.text, "fine");
    assert_eq!(m.bodies.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_three_retries() {
    let m = mock(vec![(500, "{}".into()); 5]);
    let err = backend(&m.url).chat(&ChatRequest::new("", "u", 0.0)).unwrap_err();
    assert!(matches!(err, LlmError::Transport { attempts: 4, .. }), "{err:?}");
    assert_eq!(m.bodies.lock().unwrap().len(), 4);
}

#[test]
fn client_errors_are_not_retried() {
    let m = mock(vec![(401, "{\"error\": \"bad key\"}".into()), (200, ok_body("x", None))]);
    let err = backend(&m.url).chat(&ChatRequest::new("", "u", 0.0)).unwrap_err();
    assert!(matches!(err, LlmError::Configuration { status: 401, .. }));
    assert_eq!(m.bodies.lock().unwrap().len(), 1);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = backend(&format!("http://127.0.0.1:{port}/v1"))
        .chat(&ChatRequest::new("", "u", 0.0))
        .unwrap_err();
    assert!(matches!(err, LlmError::Transport { .. }));
}

#[test]
fn preflight_asks_for_one_token() {
    let m = mock(vec![(200, ok_body("p", Some(1)))]);
    backend(&m.url).preflight().unwrap();
    assert_eq!(m.bodies.lock().unwrap()[0]["max_tokens"], 1);
}
