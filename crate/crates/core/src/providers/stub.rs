//! Scripted offline provider.
//!
//! A fixture is a TOML file with an ordered list of `[[rule]]` tables. The
//! first rule whose `kind`, optional `model` and `match` all fit the request
//! wins. A request that matches nothing is a hard error so tests notice when
//! traffic leaks past the script.
//!
//! ```toml
//! [[rule]]
//! kind = "chat"            # chat | score | next_token | embed
//! match = "physics"        # substring of the request text ("" matches all)
//! model = "qm-a"           # optional: restrict to a ModelSpec id
//! reply = "Question: ..."
//!
//! [[rule]]
//! kind = "chat"
//! match = "Zorban"
//! select_choice = "The Rising of the Blue Comet"   # reply "Answer: <letter shown>"
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use regex::Regex;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{Backend, ChatRequest, ProviderError, Result, ScoredCompletion, TokenLogprob};
use crate::domain::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StubKind {
    Chat,
    Score,
    NextToken,
    Embed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StubError {
    Transport,
    RateLimited,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubRule {
    pub kind: StubKind,
    #[serde(rename = "match", default)]
    pub pattern: String,
    /// Treat `match` as a regular expression.
    #[serde(default)]
    pub regex: bool,
    #[serde(default)]
    pub model: Option<String>,
    /// The rule retires after this many uses.
    #[serde(default)]
    pub times: Option<u32>,
    #[serde(default)]
    pub error: Option<StubError>,

    #[serde(default)]
    pub reply: Option<String>,
    #[serde(default)]
    pub select_choice: Option<String>,

    /// Score rules: exact continuation to match.
    #[serde(default)]
    pub continuation: Option<String>,
    #[serde(default)]
    pub logprobs: Option<Vec<(String, f64)>>,
    /// Score rules: split the continuation on whitespace, one logprob per word.
    #[serde(default)]
    pub uniform_logprob: Option<f64>,

    #[serde(default)]
    pub distribution: Option<BTreeMap<String, f64>>,

    #[serde(default)]
    pub vector: Option<Vec<f64>>,
    /// Embed rules: deterministic pseudo-random vector of this width derived
    /// from the text.
    #[serde(default)]
    pub hash_vector: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct Fixture {
    #[serde(default)]
    rule: Vec<StubRule>,
}

pub struct StubBackend {
    rules: Vec<(StubRule, Option<Regex>)>,
    uses: Mutex<Vec<u32>>,
}

impl StubBackend {
    pub fn new(rules: Vec<StubRule>) -> Result<StubBackend> {
        let rules = rules
            .into_iter()
            .map(|r| {
                let re = if r.regex {
                    Some(Regex::new(&r.pattern).map_err(|e| ProviderError::Fixture(e.to_string()))?)
                } else {
                    None
                };
                Ok((r, re))
            })
            .collect::<Result<Vec<_>>>()?;
        let uses = Mutex::new(vec![0; rules.len()]);
        Ok(StubBackend { rules, uses })
    }

    pub fn from_toml(text: &str) -> Result<StubBackend> {
        let f: Fixture = toml::from_str(text).map_err(|e| ProviderError::Fixture(e.to_string()))?;
        Self::new(f.rule)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<StubBackend> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ProviderError::Fixture(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml(&text)
    }

    /// Finds the first live rule for the request and resolves it with
    /// `resolve`; a rule whose resolver declines falls through to the next.
    fn dispatch<T>(
        &self,
        kind: StubKind,
        spec: &ModelSpec,
        text: &str,
        mut resolve: impl FnMut(&StubRule) -> Option<Result<T>>,
    ) -> Result<T> {
        let mut uses = self.uses.lock().expect("stub lock");
        for (i, (rule, re)) in self.rules.iter().enumerate() {
            if rule.kind != kind {
                continue;
            }
            if rule.model.as_deref().is_some_and(|m| m != spec.id) {
                continue;
            }
            if rule.times.is_some_and(|t| uses[i] >= t) {
                continue;
            }
            let hit = match re {
                Some(re) => re.is_match(text),
                None => text.contains(&rule.pattern),
            };
            if !hit {
                continue;
            }
            if let Some(err) = rule.error {
                uses[i] += 1;
                return Err(match err {
                    StubError::Transport => ProviderError::Transport("scripted failure".into()),
                    StubError::RateLimited => {
                        ProviderError::RateLimited { retry_after: Some(Duration::from_millis(1)) }
                    }
                });
            }
            if let Some(out) = resolve(rule) {
                uses[i] += 1;
                return out;
            }
        }
        let snippet: String = text.chars().take(120).collect();
        Err(ProviderError::UnmatchedRequest(format!("[{kind:?} {}] {snippet}", spec.id)))
    }
}

/// Letter under which a choice text is shown in a rendered answer prompt.
fn presented_letter(prompt: &str, choice_text: &str) -> Option<char> {
    prompt.lines().find_map(|line| {
        let mut chars = line.chars();
        let letter = chars.next()?;
        let rest = chars.as_str().strip_prefix(". ")?;
        (('A'..='E').contains(&letter) && rest.trim() == choice_text.trim()).then_some(letter)
    })
}

fn hash_vector(text: &str, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let d = Sha256::digest(format!("{i}\u{0}{text}").as_bytes());
            let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
            (x as f64 / u64::MAX as f64) * 2.0 - 1.0
        })
        .collect()
}

impl Backend for StubBackend {
    fn chat(&self, spec: &ModelSpec, req: &ChatRequest) -> Result<String> {
        let text = req.joined_text();
        let last_user = req.messages.last().map(|m| m.content.as_str()).unwrap_or("");
        self.dispatch(StubKind::Chat, spec, &text, |rule| {
            if let Some(choice) = &rule.select_choice {
                return presented_letter(last_user, choice).map(|l| Ok(format!("Answer: {l}")));
            }
            Some(rule.reply.clone().ok_or_else(|| ProviderError::Fixture("chat rule without reply".into())))
        })
    }

    fn score_completion(&self, spec: &ModelSpec, context: &str, continuation: &str) -> Result<ScoredCompletion> {
        let text = format!("{context}{continuation}");
        self.dispatch(StubKind::Score, spec, &text, |rule| {
            if rule.continuation.as_deref().is_some_and(|c| c != continuation) {
                return None;
            }
            let token_logprobs = if let Some(lps) = &rule.logprobs {
                lps.iter().map(|(t, lp)| TokenLogprob { token_text: t.clone(), logprob: *lp }).collect()
            } else if let Some(lp) = rule.uniform_logprob {
                continuation
                    .split_whitespace()
                    .map(|w| TokenLogprob { token_text: w.to_string(), logprob: lp })
                    .collect()
            } else {
                return Some(Err(ProviderError::Fixture("score rule without logprobs".into())));
            };
            Some(Ok(ScoredCompletion { text: continuation.to_string(), token_logprobs }))
        })
    }

    fn next_tokens(&self, spec: &ModelSpec, context: &str, top_k: usize) -> Result<Vec<(String, f64)>> {
        self.dispatch(StubKind::NextToken, spec, context, |rule| {
            let dist = rule.distribution.as_ref()?;
            let mut v: Vec<(String, f64)> = dist.iter().map(|(t, p)| (t.clone(), *p)).collect();
            v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            v.truncate(top_k);
            Some(Ok(v))
        })
    }

    fn embed(&self, spec: &ModelSpec, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                self.dispatch(StubKind::Embed, spec, t, |rule| {
                    if let Some(v) = &rule.vector {
                        Some(Ok(v.clone()))
                    } else {
                        rule.hash_vector.map(|d| Ok(hash_vector(t, d)))
                    }
                })
            })
            .collect()
    }
}
