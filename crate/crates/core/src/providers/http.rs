//! OpenAI-compatible HTTP transport.
//!
//! - chat: `POST {base}/chat/completions`
//! - continuation logprobs: `POST {base}/completions` with `echo`, `logprobs`
//!   and `max_tokens = 0`
//! - next-token probabilities: `POST {base}/completions` with `max_tokens = 1`
//!   and `logprobs = k`
//! - embeddings: `POST {base}/embeddings`

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use reqwest::blocking::Client as HttpClient;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{Backend, ChatRequest, ProviderError, Result, ScoredCompletion, TokenLogprob};
use crate::domain::ModelSpec;

/// Counting semaphore bounding in-flight requests per model.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Limiter {
        Limiter { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter") += 1;
        self.0.cv.notify_one();
    }
}

pub struct HttpBackend {
    http: HttpClient,
    max_in_flight: usize,
    limiters: Mutex<HashMap<String, Arc<Limiter>>>,
}

impl HttpBackend {
    pub fn new(timeout: Duration, max_in_flight: usize) -> Result<HttpBackend> {
        let http =
            HttpClient::builder().timeout(timeout).build().map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(HttpBackend { http, max_in_flight, limiters: Mutex::new(HashMap::new()) })
    }

    fn limiter(&self, spec: &ModelSpec) -> Arc<Limiter> {
        let mut map = self.limiters.lock().expect("limiters");
        map.entry(spec.id.clone()).or_insert_with(|| Arc::new(Limiter::new(self.max_in_flight))).clone()
    }

    fn post(&self, spec: &ModelSpec, route: &str, body: &Value) -> Result<Value> {
        let limiter = self.limiter(spec);
        let _permit = limiter.acquire();
        let url = format!("{}/{route}", spec.base_url.trim_end_matches('/'));
        let mut req = self.http.post(&url).json(body);
        if let Some(var) = &spec.api_key_env {
            let key = std::env::var(var)
                .map_err(|_| ProviderError::InvalidRequest(format!("environment variable {var} is not set")))?;
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status();
        if status == StatusCode::TOO_MANY_REQUESTS {
            let retry_after = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Err(ProviderError::RateLimited { retry_after });
        }
        let text = resp.text().map_err(|e| ProviderError::Transport(e.to_string()))?;
        if status.is_server_error() {
            return Err(ProviderError::Transport(format!("{status}: {text}")));
        }
        if !status.is_success() {
            return Err(ProviderError::Api { status: status.as_u16(), body: text });
        }
        serde_json::from_str(&text).map_err(|e| ProviderError::Protocol(format!("{e}: {text}")))
    }
}

fn protocol(what: &str) -> ProviderError {
    ProviderError::Protocol(format!("missing {what}"))
}

fn unsupported(spec: &ModelSpec) -> ProviderError {
    ProviderError::UnsupportedEndpoint { model: spec.id.clone(), operation: "continuation logprobs" }
}

/// Picks the echoed tokens that overlap the continuation, i.e. whose end
/// offset lies past the context. Offsets are in characters.
pub(crate) fn continuation_tokens(logprobs: &Value, context_chars: usize) -> Result<Vec<TokenLogprob>> {
    let tokens = logprobs["tokens"].as_array().ok_or_else(|| protocol("logprobs.tokens"))?;
    let lps = logprobs["token_logprobs"].as_array().ok_or_else(|| protocol("logprobs.token_logprobs"))?;
    let offsets = logprobs["text_offset"].as_array().ok_or_else(|| protocol("logprobs.text_offset"))?;
    if tokens.len() != lps.len() || tokens.len() != offsets.len() {
        return Err(ProviderError::Protocol("ragged logprob arrays".into()));
    }
    let mut out = Vec::new();
    for ((tok, lp), off) in tokens.iter().zip(lps).zip(offsets) {
        let tok = tok.as_str().ok_or_else(|| protocol("token text"))?;
        let off = off.as_u64().ok_or_else(|| protocol("text offset"))? as usize;
        let end = off + tok.chars().count();
        if end <= context_chars {
            continue;
        }
        let lp = lp.as_f64().ok_or_else(|| protocol("continuation logprob"))?;
        out.push(TokenLogprob { token_text: tok.to_string(), logprob: lp });
    }
    Ok(out)
}

impl Backend for HttpBackend {
    fn chat(&self, spec: &ModelSpec, req: &ChatRequest) -> Result<String> {
        let body = json!({
            "model": req.model_name,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let v = self.post(spec, "chat/completions", &body)?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| protocol("choices[0].message.content"))
    }

    fn score_completion(&self, spec: &ModelSpec, context: &str, continuation: &str) -> Result<ScoredCompletion> {
        let body = json!({
            "model": spec.model_name,
            "prompt": format!("{context}{continuation}"),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
            "temperature": 0.0,
        });
        let v = match self.post(spec, "completions", &body) {
            Err(ProviderError::Api { status: 400 | 404 | 422, .. }) => return Err(unsupported(spec)),
            other => other?,
        };
        let lp = &v["choices"][0]["logprobs"];
        if lp.is_null() {
            return Err(unsupported(spec));
        }
        let token_logprobs = continuation_tokens(lp, context.chars().count())?;
        Ok(ScoredCompletion { text: continuation.to_string(), token_logprobs })
    }

    fn next_tokens(&self, spec: &ModelSpec, context: &str, top_k: usize) -> Result<Vec<(String, f64)>> {
        let body = json!({
            "model": spec.model_name,
            "prompt": context,
            "max_tokens": 1,
            "logprobs": top_k,
            "temperature": 0.0,
        });
        let v = match self.post(spec, "completions", &body) {
            Err(ProviderError::Api { status: 400 | 404 | 422, .. }) => return Err(unsupported(spec)),
            other => other?,
        };
        let top = v["choices"][0]["logprobs"]["top_logprobs"][0].as_object().ok_or_else(|| unsupported(spec))?;
        top.iter()
            .map(|(tok, lp)| {
                let lp = lp.as_f64().ok_or_else(|| protocol("top logprob"))?;
                Ok((tok.clone(), lp.exp()))
            })
            .collect()
    }

    fn embed(&self, spec: &ModelSpec, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = json!({ "model": spec.model_name, "input": texts });
        let v = self.post(spec, "embeddings", &body)?;
        let data = v["data"].as_array().ok_or_else(|| protocol("data"))?;
        let mut rows: Vec<(u64, Vec<f64>)> = data
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let idx = d["index"].as_u64().unwrap_or(i as u64);
                let vec = d["embedding"]
                    .as_array()
                    .ok_or_else(|| protocol("embedding"))?
                    .iter()
                    .map(|x| x.as_f64().ok_or_else(|| protocol("embedding value")))
                    .collect::<Result<Vec<f64>>>()?;
                Ok((idx, vec))
            })
            .collect::<Result<_>>()?;
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn continuation_tokens_include_boundary_straddlers() {
        // context "Answer: " is 8 chars; tokenizer merged the space into " Hyd".
        let lp = json!({
            "tokens": ["Answer", ":", " Hyd", "rogen"],
            "token_logprobs": [null, -1.0, -0.1, -0.2],
            "text_offset": [0, 6, 7, 11],
        });
        let out = continuation_tokens(&lp, 8).unwrap();
        let texts: Vec<&str> = out.iter().map(|t| t.token_text.as_str()).collect();
        assert_eq!(texts, vec![" Hyd", "rogen"]);
        assert_eq!(out[1].logprob, -0.2);
    }

    #[test]
    fn ragged_logprob_arrays_are_protocol_errors() {
        let lp = json!({ "tokens": ["a"], "token_logprobs": [], "text_offset": [0] });
        assert!(matches!(continuation_tokens(&lp, 0), Err(ProviderError::Protocol(_))));
    }

    #[test]
    fn limiter_bounds_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let lim = Arc::new(Limiter::new(2));
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..8 {
                let (lim, live, peak) = (lim.clone(), live.clone(), peak.clone());
                s.spawn(move || {
                    let _p = lim.acquire();
                    let n = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(n, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
