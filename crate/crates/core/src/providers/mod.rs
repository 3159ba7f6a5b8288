//! Uniform client over chat, completion-with-logprobs and embedding endpoints.
//!
//! A [`Backend`] does the raw transport (HTTP or the scripted [`StubBackend`]).
//! [`Client`] wraps a backend with the content-addressed response cache,
//! bounded retries with exponential backoff, and request statistics.

mod cache;
mod http;
mod stub;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{EndpointKind, ModelSpec};

pub use cache::{CacheKey, ResponseCache};
pub use http::HttpBackend;
pub use stub::{StubBackend, StubRule};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("model '{model}' does not support {operation}")]
    UnsupportedEndpoint { model: String, operation: &'static str },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no stub rule matches request: {0}")]
    UnmatchedRequest(String),
    #[error("api error {status}: {body}")]
    Api { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Protocol(String),
    #[error("stub fixture: {0}")]
    Fixture(String),
    #[error("cache i/o: {0}")]
    Cache(#[from] std::io::Error),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transport(_) | ProviderError::RateLimited { .. })
    }
}

pub type Result<T, E = ProviderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRole {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: MessageRole::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: MessageRole::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_name: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<()> {
        match self.messages.first() {
            None => Err(ProviderError::InvalidRequest("no messages".into())),
            Some(m) if m.role != MessageRole::User => {
                Err(ProviderError::InvalidRequest("first message must be from the user".into()))
            }
            _ => Ok(()),
        }
    }

    /// Concatenated message contents, used for stub matching.
    pub fn joined_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token_text: String,
    pub logprob: f64,
}

/// Per-token log-likelihoods of a continuation given its context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCompletion {
    pub text: String,
    pub token_logprobs: Vec<TokenLogprob>,
}

impl ScoredCompletion {
    pub fn validate(&self) -> Result<()> {
        for t in &self.token_logprobs {
            if !t.logprob.is_finite() || t.logprob > 0.0 {
                return Err(ProviderError::Protocol(format!(
                    "logprob {} for token {:?} is not a finite value ≤ 0",
                    t.logprob, t.token_text
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenForm {
    Bare,
    SpacePrefixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateProbability {
    pub probability: f64,
    /// Which tokenization carried the reported probability.
    pub form: TokenForm,
    /// Neither form appeared in the returned top-k.
    pub absent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextTokenDistribution {
    pub entries: BTreeMap<String, CandidateProbability>,
}

impl NextTokenDistribution {
    pub fn probability(&self, candidate: &str) -> f64 {
        self.entries.get(candidate).map_or(0.0, |c| c.probability)
    }
}

/// Raw transport to a model server.
pub trait Backend: Send + Sync {
    fn chat(&self, spec: &ModelSpec, req: &ChatRequest) -> Result<String>;

    /// Log-likelihoods of exactly the tokens covering `continuation`.
    fn score_completion(&self, spec: &ModelSpec, context: &str, continuation: &str) -> Result<ScoredCompletion>;

    /// Top next-token candidates after `context`, as (token text, probability).
    fn next_tokens(&self, spec: &ModelSpec, context: &str, top_k: usize) -> Result<Vec<(String, f64)>>;

    fn embed(&self, spec: &ModelSpec, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts per request, including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 4, base_delay_ms: 500, max_delay_ms: 30_000 }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32, err: &ProviderError) -> Duration {
        let backoff = self.base_delay_ms.saturating_mul(1u64 << attempt.min(20)).min(self.max_delay_ms);
        match err {
            ProviderError::RateLimited { retry_after: Some(d) } => (*d).min(Duration::from_millis(self.max_delay_ms)),
            _ => Duration::from_millis(backoff),
        }
    }
}

#[derive(Debug, Default)]
pub struct Stats {
    pub requests: AtomicU64,
    pub cache_hits: AtomicU64,
    pub retries: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub requests: u64,
    pub cache_hits: u64,
    pub retries: u64,
}

/// Top-k requested from the server when looking up candidate letters.
pub const NEXT_TOKEN_TOP_K: usize = 20;

pub struct Client {
    backend: Arc<dyn Backend>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    stats: Stats,
}

impl Client {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Client { backend, cache: None, retry: RetryPolicy::default(), stats: Stats::default() }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn stats(&self) -> StatsSnapshot {
        StatsSnapshot {
            requests: self.stats.requests.load(Ordering::Relaxed),
            cache_hits: self.stats.cache_hits.load(Ordering::Relaxed),
            retries: self.stats.retries.load(Ordering::Relaxed),
        }
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            self.stats.requests.fetch_add(1, Ordering::Relaxed);
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt + 1 < self.retry.max_attempts.max(1) => {
                    let delay = self.retry.delay(attempt, &e);
                    log::warn!("attempt {} failed ({e}); retrying in {delay:?}", attempt + 1);
                    self.stats.retries.fetch_add(1, Ordering::Relaxed);
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn cached<T: Serialize + for<'de> Deserialize<'de>>(
        &self,
        key: Option<&CacheKey>,
        fetch: impl FnMut() -> Result<T>,
    ) -> Result<T> {
        if let (Some(cache), Some(key)) = (&self.cache, key) {
            if let Some(hit) = cache.get_json::<T>(key)? {
                self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(hit);
            }
            let value = self.with_retries(fetch)?;
            cache.put_json(key, &value)?;
            Ok(value)
        } else {
            self.with_retries(fetch)
        }
    }

    fn require(spec: &ModelSpec, kind: EndpointKind, operation: &'static str) -> Result<()> {
        if spec.endpoint_kind == kind {
            Ok(())
        } else {
            Err(ProviderError::UnsupportedEndpoint { model: spec.id.clone(), operation })
        }
    }

    /// Sends a chat request. Temperature-0 responses are cached by request
    /// content; sampled responses are cached only when a `replay` key (run id
    /// plus ordinal) is given, so a resumed run sees identical generations.
    pub fn chat(&self, spec: &ModelSpec, req: &ChatRequest, replay: Option<&str>) -> Result<String> {
        Self::require(spec, EndpointKind::Chat, "chat")?;
        req.validate()?;
        let key = if req.temperature == 0.0 || replay.is_some() {
            Some(CacheKey::new(
                EndpointKind::Chat,
                &req.model_name,
                &serde_json::to_value(req).expect("request serializes"),
                req.temperature,
                if req.temperature == 0.0 { None } else { replay },
            ))
        } else {
            None
        };
        match (&self.cache, &key) {
            (Some(cache), Some(key)) => {
                if let Some(hit) = cache.get_text(key)? {
                    self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(hit);
                }
                let text = self.with_retries(|| self.backend.chat(spec, req))?;
                cache.put_text(key, &text)?;
                Ok(text)
            }
            _ => self.with_retries(|| self.backend.chat(spec, req)),
        }
    }

    pub fn score_completion(&self, spec: &ModelSpec, context: &str, continuation: &str) -> Result<ScoredCompletion> {
        Self::require(spec, EndpointKind::CompletionWithLogprobs, "continuation logprobs")?;
        if continuation.is_empty() {
            return Err(ProviderError::InvalidRequest("empty continuation".into()));
        }
        let payload = serde_json::json!({ "context": context, "continuation": continuation });
        let key = CacheKey::new(spec.endpoint_kind, &spec.model_name, &payload, 0.0, Some("score"));
        let scored = self.cached(Some(&key), || self.backend.score_completion(spec, context, continuation))?;
        scored.validate()?;
        Ok(scored)
    }

    /// Probability of each candidate as the next token. Both the bare and the
    /// space-prefixed form are looked up and the larger probability is kept.
    pub fn next_token_distribution(
        &self,
        spec: &ModelSpec,
        context: &str,
        candidates: &[&str],
    ) -> Result<NextTokenDistribution> {
        Self::require(spec, EndpointKind::CompletionWithLogprobs, "next-token probabilities")?;
        if candidates.is_empty() {
            return Err(ProviderError::InvalidRequest("no candidates".into()));
        }
        let payload = serde_json::json!({ "context": context, "top_k": NEXT_TOKEN_TOP_K });
        let key = CacheKey::new(spec.endpoint_kind, &spec.model_name, &payload, 0.0, Some("next"));
        let top = self.cached(Some(&key), || self.backend.next_tokens(spec, context, NEXT_TOKEN_TOP_K))?;
        let lookup = |tok: &str| top.iter().find(|(t, _)| t == tok).map(|(_, p)| *p);
        let mut entries = BTreeMap::new();
        for &cand in candidates {
            let bare = lookup(cand);
            let spaced = lookup(&format!(" {cand}"));
            let entry = match (bare, spaced) {
                (None, None) => CandidateProbability { probability: 0.0, form: TokenForm::Bare, absent: true },
                (b, s) => {
                    let (b, s) = (b.unwrap_or(-1.0), s.unwrap_or(-1.0));
                    if s > b {
                        CandidateProbability { probability: s, form: TokenForm::SpacePrefixed, absent: false }
                    } else {
                        CandidateProbability { probability: b, form: TokenForm::Bare, absent: false }
                    }
                }
            };
            if !(0.0..=1.0).contains(&entry.probability) {
                return Err(ProviderError::Protocol(format!(
                    "probability {} for {cand:?} outside [0, 1]",
                    entry.probability
                )));
            }
            entries.insert(cand.to_string(), entry);
        }
        Ok(NextTokenDistribution { entries })
    }

    /// Embeds each text and L2-normalizes the result.
    pub fn embed(&self, spec: &ModelSpec, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Self::require(spec, EndpointKind::Embedding, "embeddings")?;
        if texts.is_empty() {
            return Err(ProviderError::InvalidRequest("no texts to embed".into()));
        }
        let payload = serde_json::json!({ "input": texts });
        let key = CacheKey::new(spec.endpoint_kind, &spec.model_name, &payload, 0.0, None);
        let raw = self.cached(Some(&key), || self.backend.embed(spec, texts))?;
        if raw.len() != texts.len() {
            return Err(ProviderError::Protocol(format!("{} vectors for {} texts", raw.len(), texts.len())));
        }
        let dim = raw[0].len();
        raw.into_iter()
            .map(|v| {
                if v.len() != dim {
                    return Err(ProviderError::DimensionMismatch { expected: dim, got: v.len() });
                }
                normalize(v)
            })
            .collect()
    }
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(ProviderError::Protocol("zero or non-finite embedding vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}
