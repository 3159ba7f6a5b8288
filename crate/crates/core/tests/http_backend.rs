//! The OpenAI-compatible backend against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use iqa::domain::ModelSpec;
use iqa::providers::{ChatMessage, ChatRequest, Client, HttpBackend, ProviderError, ResponseCache, RetryPolicy};

struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

/// Serves `replies` (status, extra headers, body) in order, one per
/// connection, and records each request.
fn serve(replies: Vec<(u16, &'static str, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, headers, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
            let (mut len, mut auth) = (0usize, None);
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (k, v) = h.split_once(':').unwrap();
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let sent = serde_json::from_slice(&buf).unwrap_or(Value::Null);
            log.lock().unwrap().push(Seen { path, auth, body: sent });
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n{headers}\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn spec(kind: &str, base_url: &str, key_env: Option<&str>) -> ModelSpec {
    let mut s: ModelSpec = serde_json::from_value(json!({
        "id": "m",
        "endpoint_kind": kind,
        "base_url": base_url,
        "model_name": "served-model",
        "role_tags": ["answer_model"],
        "family": "f",
    }))
    .unwrap();
    s.api_key_env = key_env.map(str::to_string);
    s
}

fn client() -> Client {
    Client::new(Arc::new(HttpBackend::new(Duration::from_secs(5), 2).unwrap())).with_retry(RetryPolicy {
        max_attempts: 3,
        base_delay_ms: 1,
        max_delay_ms: 5,
    })
}

fn chat_reply(text: &str) -> String {
    json!({ "choices": [{ "message": { "role": "assistant", "content": text } }] }).to_string()
}

fn request(text: &str) -> ChatRequest {
    ChatRequest {
        model_name: "served-model".into(),
        messages: vec![ChatMessage::user(text)],
        temperature: 0.0,
        max_tokens: 16,
    }
}

#[test]
fn chat_sends_bearer_key_from_env_and_reads_content() {
    std::env::set_var("IQA_TEST_KEY_CHAT", "sk-test");
    let (url, seen) = serve(vec![(200, "", chat_reply("Answer: B"))]);
    let s = spec("chat", &url, Some("IQA_TEST_KEY_CHAT"));
    let out = client().chat(&s, &request("hello"), None).unwrap();
    assert_eq!(out, "Answer: B");
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(seen[0].body["model"], "served-model");
    assert_eq!(seen[0].body["messages"][0]["content"], "hello");
    assert_eq!(seen[0].body["temperature"], 0.0);
}

#[test]
fn missing_key_variable_fails_before_sending() {
    let s = spec("chat", "http://127.0.0.1:9", Some("IQA_TEST_KEY_UNSET_VARIABLE"));
    let err = client().chat(&s, &request("x"), None).unwrap_err();
    assert!(matches!(err, ProviderError::InvalidRequest(m) if m.contains("IQA_TEST_KEY_UNSET_VARIABLE")));
}

#[test]
fn rate_limits_and_server_errors_are_retried() {
    let (url, seen) = serve(vec![
        (429, "retry-after: 0\r\n", "{}".into()),
        (503, "", "overloaded".into()),
        (200, "", chat_reply("C")),
    ]);
    let c = client();
    assert_eq!(c.chat(&spec("chat", &url, None), &request("q"), None).unwrap(), "C");
    assert_eq!(seen.lock().unwrap().len(), 3);
    assert_eq!(c.stats().retries, 2);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(401, "", r#"{"error":"bad key"}"#.into())]);
    let err = client().chat(&spec("chat", &url, None), &request("q"), None).unwrap_err();
    assert!(matches!(err, ProviderError::Api { status: 401, .. }));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn temperature_zero_chat_is_served_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let (url, seen) = serve(vec![(200, "", chat_reply("A"))]);
    let c = client().with_cache(ResponseCache::open(dir.path()).unwrap());
    let s = spec("chat", &url, None);
    assert_eq!(c.chat(&s, &request("same"), None).unwrap(), "A");
    assert_eq!(c.chat(&s, &request("same"), None).unwrap(), "A");
    assert_eq!(seen.lock().unwrap().len(), 1);
    assert_eq!(c.stats().cache_hits, 1);
}

#[test]
fn echoed_logprobs_score_only_the_continuation() {
    // "Answer: " is 8 characters; the server merged the space into " Hyd".
    let reply = json!({ "choices": [{ "logprobs": {
        "tokens": ["Answer", ":", " Hyd", "rogen"],
        "token_logprobs": [null, -0.5, -1.25, -0.25],
        "text_offset": [0, 6, 7, 11],
    }}]});
    let (url, seen) = serve(vec![(200, "", reply.to_string())]);
    let s = spec("completion_with_logprobs", &url, None);
    let scored = client().score_completion(&s, "Answer: ", "Hydrogen").unwrap();
    let lps: Vec<f64> = scored.token_logprobs.iter().map(|t| t.logprob).collect();
    assert_eq!(lps, vec![-1.25, -0.25]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/completions");
    assert_eq!(seen[0].body["echo"], true);
    assert_eq!(seen[0].body["prompt"], "Answer: Hydrogen");
}

#[test]
fn servers_without_echo_are_unsupported() {
    let (url, _) = serve(vec![(400, "", r#"{"error":"echo not supported"}"#.into())]);
    let s = spec("completion_with_logprobs", &url, None);
    let err = client().score_completion(&s, "ctx", "cont").unwrap_err();
    assert!(matches!(err, ProviderError::UnsupportedEndpoint { .. }), "{err:?}");
}

#[test]
fn chat_models_cannot_score() {
    let s = spec("chat", "http://127.0.0.1:9", None);
    let err = client().score_completion(&s, "ctx", "cont").unwrap_err();
    assert!(matches!(err, ProviderError::UnsupportedEndpoint { .. }));
}

#[test]
fn embeddings_are_reordered_by_index() {
    let reply = json!({ "data": [
        { "index": 1, "embedding": [0.0, 1.0] },
        { "index": 0, "embedding": [1.0, 0.0] },
    ]});
    let (url, seen) = serve(vec![(200, "", reply.to_string())]);
    let s = spec("embedding", &url, None);
    let out = client().embed(&s, &["first".into(), "second".into()]).unwrap();
    assert_eq!(out, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(seen.lock().unwrap()[0].path, "/v1/embeddings");
}
