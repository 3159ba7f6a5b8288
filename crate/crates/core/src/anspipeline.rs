//! Answer collection: present each question to an answer model, parse the
//! reply, and record the outcome in native labels.

use std::collections::HashSet;
use std::sync::LazyLock;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    AnswerRecord, Label, ModelSpec, Outcome, Permutation, Presentation, PresentationKind, Question, Role,
};
use crate::genpipeline::parse::{answer_letter, answer_line_content, clean_line, ParseFailure, Strictness};
use crate::prompts;
use crate::providers::{ChatMessage, ChatRequest, Client, ProviderError};
use crate::store::{RunStore, StoreError};

#[derive(Debug, Error)]
pub enum AnswerError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("question {0} is not in the store")]
    MissingQuestion(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Deterministic per-record RNG derived from the run seed and the question id.
pub fn record_rng(seed: u64, question_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(question_id.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes))
}

/// Builds the prompt body for `question`. With `shuffle` the A-D choices are
/// permuted uniformly; with `augment_e` the fixed E line follows them.
pub fn present<R: Rng + ?Sized>(question: &Question, shuffle: bool, augment_e: bool, rng: &mut R) -> Presentation {
    let permutation = if shuffle {
        let mut order = Label::ALL;
        order.shuffle(rng);
        Permutation::new(order).expect("shuffle of a bijection")
    } else {
        Permutation::IDENTITY
    };
    present_with(question, permutation, shuffle, augment_e)
}

/// Presentation of `question` under a given permutation.
pub fn present_with(question: &Question, permutation: Permutation, shuffled: bool, augment_e: bool) -> Presentation {
    let presented: Vec<&str> = Label::ALL.iter().map(|&p| question.choice(permutation.native(p))).collect();
    Presentation {
        question_id: question.question_id.clone(),
        permutation,
        shuffled,
        augmented_e: augment_e,
        presented_text: prompts::question_body(&question.statement, &presented, augment_e),
    }
}

static ANSWER_IS: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"\b(?i:answer|choice|option)(?:\s+(?i:is|would\s+be))?\s*:?\s*(?i:option\s+|choice\s+)?[\(\[]?([A-E])(?:$|[^A-Za-z0-9'])",
    )
        .unwrap()
});

static REFUSAL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(?:i\s+apologi[sz]e|i'?m\s+sorry|i\s+am\s+sorry|i\s+(?:cannot|can't|can\s+not|am\s+unable|'m\s+unable|am\s+not\s+able)|i'm\s+unable|unable\s+to\s+(?:answer|determine|provide)|cannot\s+be\s+answered|can't\s+be\s+answered|not\s+possible\s+to\s+(?:answer|determine)|does\s+not\s+exist|doesn't\s+exist|fictional|fictitious|made[-\s]up|not\s+a\s+real|no\s+such|not\s+aware\s+of|no\s+(?:information|knowledge)\s+(?:about|on|of))",
    )
    .unwrap()
});

/// True when the text reads as declining to answer.
pub fn is_refusal(text: &str) -> bool {
    REFUSAL.is_match(text)
}

/// Classifies a reply. A letter anywhere in an answer position wins over
/// refusal cues; refusal requires no letter at all.
pub fn parse_answer(raw_response: &str, presentation: &Presentation) -> Outcome {
    let allowed: &[char] = if presentation.augmented_e { &['A', 'B', 'C', 'D', 'E'] } else { &['A', 'B', 'C', 'D'] };
    match find_letter(raw_response, allowed) {
        Ok(Some('E')) => Outcome::SelectedE,
        Ok(Some(c)) => {
            let presented = Label::from_letter(c).expect("A-D");
            Outcome::Selected(presentation.permutation.native(presented))
        }
        Ok(None) if is_refusal(raw_response) => Outcome::Refused,
        _ => Outcome::ParseError,
    }
}

fn find_letter(raw: &str, allowed: &[char]) -> Result<Option<char>, ParseFailure> {
    let lines: Vec<String> = raw.lines().map(clean_line).collect();
    for (i, line) in lines.iter().enumerate() {
        if let Some(mut content) = answer_line_content(line) {
            if content.is_empty() {
                content = lines[i + 1..].iter().find(|l| !l.is_empty()).cloned().unwrap_or_default();
            }
            if let Some(c) = answer_letter(&content, allowed, Strictness::Tolerant)? {
                return Ok(Some(c));
            }
        }
    }
    // A reply that is just the letter, possibly followed by the choice text.
    if let Some(first) = lines.iter().find(|l| !l.is_empty()) {
        let mut chars = first.chars().skip_while(|c| *c == '(' || *c == '[');
        if let Some(c) = chars.next() {
            let rest: String = chars.collect();
            let boundary = rest.is_empty() || rest.starts_with(['.', ')', ']', ':', ' ', ',']);
            if allowed.contains(&c) && boundary && !rest.trim_start().starts_with(|c: char| c.is_lowercase()) {
                return Ok(Some(c));
            }
        }
    }
    Ok(ANSWER_IS.captures_iter(raw).map(|m| m[1].chars().next().expect("letter")).find(|c| allowed.contains(c)))
}

#[derive(Debug, Clone)]
pub struct AnswerTask {
    pub am: ModelSpec,
    pub question_ids: Vec<String>,
    pub shuffle: bool,
    pub augment_e: bool,
    pub rng_seed: u64,
}

impl AnswerTask {
    pub fn kind(&self) -> PresentationKind {
        PresentationKind::from_flags(self.shuffle, self.augment_e)
    }
}

/// Presents one question to `am` and parses the reply. Answers are requested
/// at the model's answer temperature (0 unless overridden).
pub fn answer_question(
    client: &Client,
    am: &ModelSpec,
    question: &Question,
    shuffle: bool,
    augment_e: bool,
    seed: u64,
) -> Result<AnswerRecord, ProviderError> {
    let presentation = present(question, shuffle, augment_e, &mut record_rng(seed, &question.question_id));
    let req = ChatRequest {
        model_name: am.model_name.clone(),
        messages: vec![ChatMessage::user(prompts::answer_prompt(&presentation.presented_text, augment_e))],
        temperature: am.answer_temperature(),
        max_tokens: am.max_tokens,
    };
    let started = Instant::now();
    let raw = client.chat(am, &req, None)?;
    let latency_ms = started.elapsed().as_millis() as u64;
    let outcome = parse_answer(&raw, &presentation);
    Ok(AnswerRecord {
        question_id: question.question_id.clone(),
        am_id: am.id.clone(),
        presentation,
        raw_response: raw,
        outcome,
        latency_ms,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnswerSummary {
    pub answered: usize,
    pub skipped: usize,
}

/// Answers every question of `task` not already answered under the same
/// presentation kind. Requests run `concurrency` at a time; records are
/// appended in task order. A provider error stops the task after the
/// successful records of the current chunk are stored.
pub fn answer_all(
    store: &RunStore,
    client: &Client,
    task: &AnswerTask,
    concurrency: usize,
) -> Result<AnswerSummary, AnswerError> {
    if !task.am.has_role(Role::AnswerModel) {
        return Err(AnswerError::InvalidTask(format!("{} is not an answer model", task.am.id)));
    }
    let kind = task.kind();
    let done: HashSet<String> = store.answered_ids(&task.am.id, kind);
    let mut summary = AnswerSummary::default();
    let mut pending = Vec::new();
    for id in &task.question_ids {
        if done.contains(id) {
            summary.skipped += 1;
            continue;
        }
        let q = store.question(id).ok_or_else(|| AnswerError::MissingQuestion(id.clone()))?;
        pending.push(q);
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(concurrency.max(1)).build().expect("thread pool");
    for chunk in pending.chunks(concurrency.max(1)) {
        let results: Vec<Result<AnswerRecord, ProviderError>> = pool.install(|| {
            use rayon::prelude::*;
            chunk
                .par_iter()
                .map(|q| answer_question(client, &task.am, q, task.shuffle, task.augment_e, task.rng_seed))
                .collect()
        });
        let mut first_err = None;
        for r in results {
            match r {
                Ok(rec) => {
                    store.append_answer(&rec)?;
                    summary.answered += 1;
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_err {
            return Err(e.into());
        }
    }
    Ok(summary)
}
