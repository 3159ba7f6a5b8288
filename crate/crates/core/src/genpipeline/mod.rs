//! Question generation: render the prompt for a mode, call the question
//! model, parse and validate the output.
//!
//! Each (qm, mode, topic, ordinal) slot gets one initial attempt plus up to
//! `regen_budget` regenerations. Failed attempts are persisted as
//! [`RejectRecord`]s with a reason code; a slot whose attempts all fail is
//! marked exhausted.

pub mod parse;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{validate_question, ContextParagraph, Mode, ModelSpec, Question, Role};
use crate::prompts;
use crate::providers::{ChatMessage, ChatRequest, Client, ProviderError};
use crate::store::{RunStore, StoreError};
use parse::{parse_context, parse_mcq_block, parse_sequential, BatchFailure, ParseFailure, Strictness};

pub const COLLEGE_SUBJECTS: [&str; 17] = [
    "mathematics",
    "computer science",
    "physics",
    "chemistry",
    "biology",
    "geography",
    "sociology",
    "psychology",
    "economics",
    "accounting",
    "marketing",
    "law",
    "politics",
    "history",
    "literature",
    "philosophy",
    "religion",
];

pub const CREATIVE_WRITING: [&str; 10] = [
    "friendship",
    "family relationship",
    "young adulthood",
    "an ancient empire",
    "an interpersonal conflict",
    "a roadtrip",
    "a childhood in poverty",
    "future technology",
    "a long-lasting war",
    "an intergalactic civilization",
];

/// Regenerations allowed per malformed question.
pub const DEFAULT_REGEN_BUDGET: u32 = 3;
/// Questions per (qm, topic) in direct and context modes.
pub const DEFAULT_COUNT: u32 = 20;
/// Five-question batches per (qm, topic) in sequential mode.
pub const DEFAULT_SEQUENTIAL_BATCHES: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicSetName {
    CollegeSubjects,
    CreativeWriting,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicSet {
    pub name: TopicSetName,
    pub topics: Vec<String>,
}

impl TopicSet {
    pub fn college_subjects() -> TopicSet {
        TopicSet {
            name: TopicSetName::CollegeSubjects,
            topics: COLLEGE_SUBJECTS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn creative_writing() -> TopicSet {
        TopicSet {
            name: TopicSetName::CreativeWriting,
            topics: CREATIVE_WRITING.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn contains(&self, topic: &str) -> bool {
        self.topics.iter().any(|t| t == topic)
    }
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("unknown topic '{0}'")]
    UnknownTopic(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("{exhausted} of {slots} slots exhausted their regeneration budget (allowed {allowed})")]
    GenerationExhausted { exhausted: usize, slots: usize, allowed: usize },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// First-turn messages for a mode. Context modes return only the first turn;
/// the second turn is appended after the model replies.
pub fn render_prompt(mode: Mode, topic: &str, topics: &TopicSet) -> Result<Vec<ChatMessage>, GenError> {
    if topic.trim().is_empty() || !topics.contains(topic) {
        return Err(GenError::UnknownTopic(topic.to_string()));
    }
    let text = match mode {
        Mode::Direct => prompts::direct_question(topic),
        Mode::Context => prompts::context_paragraph(topic),
        Mode::Sequential => prompts::sequential_questions(topic),
        Mode::CreativeDirect => prompts::creative_direct_question(topic),
        Mode::CreativeContext => prompts::creative_story(topic),
    };
    Ok(vec![ChatMessage::user(text)])
}

fn second_turn(mode: Mode) -> String {
    if mode.is_creative() {
        prompts::creative_context_question()
    } else {
        prompts::context_question()
    }
}

#[derive(Debug, Clone)]
pub struct GenerationTask {
    pub qm: ModelSpec,
    pub mode: Mode,
    pub topic: String,
    /// Questions for single-question modes; five-question batches for
    /// sequential mode.
    pub count: u32,
}

impl GenerationTask {
    fn check(&self) -> Result<(), GenError> {
        if self.count == 0 {
            return Err(GenError::InvalidTask("count must be at least 1".into()));
        }
        if !self.qm.has_role(Role::QuestionModel) {
            return Err(GenError::InvalidTask(format!("{} is not a question model", self.qm.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NoAnswerLine,
    BadChoiceCount,
    AmbiguousAnswer,
    EmptyStatement,
    ContextParseFailure,
    BadBatch,
    Invalid,
}

impl From<ParseFailure> for RejectReason {
    fn from(f: ParseFailure) -> Self {
        match f {
            ParseFailure::NoAnswerLine => RejectReason::NoAnswerLine,
            ParseFailure::BadChoiceCount => RejectReason::BadChoiceCount,
            ParseFailure::AmbiguousAnswer => RejectReason::AmbiguousAnswer,
            ParseFailure::EmptyStatement => RejectReason::EmptyStatement,
        }
    }
}

/// One failed generation attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectRecord {
    pub qm_id: String,
    pub mode: Mode,
    pub topic: String,
    pub ordinal: u32,
    pub attempt: u32,
    pub reason: RejectReason,
    pub detail: String,
    pub raw_generation: String,
    /// This was the final attempt for the slot.
    pub exhausted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SlotKey {
    pub qm_id: String,
    pub mode: Mode,
    pub topic: String,
    pub ordinal: u32,
}

#[derive(Debug, Clone, Default)]
pub struct SlotOutcome {
    pub questions: Vec<Question>,
    pub rejects: Vec<RejectRecord>,
}

impl SlotOutcome {
    pub fn exhausted(&self) -> bool {
        self.questions.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Generated {
    pub questions: Vec<Question>,
    pub rejects: Vec<RejectRecord>,
    pub exhausted_slots: usize,
}

pub struct Generator<'a> {
    pub client: &'a Client,
    pub run_id: String,
    pub strictness: Strictness,
    pub regen_budget: u32,
}

enum Attempt {
    Accepted(Vec<Question>),
    Rejected { reason: RejectReason, detail: String, raw: String },
}

impl<'a> Generator<'a> {
    pub fn new(client: &'a Client, run_id: impl Into<String>) -> Self {
        Generator {
            client,
            run_id: run_id.into(),
            strictness: Strictness::Tolerant,
            regen_budget: DEFAULT_REGEN_BUDGET,
        }
    }

    fn request(&self, qm: &ModelSpec, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            model_name: qm.model_name.clone(),
            messages,
            temperature: qm.question_temperature(),
            max_tokens: qm.max_tokens,
        }
    }

    fn replay(&self, qm: &ModelSpec, mode: Mode, topic: &str, ordinal: u32, attempt: u32, turn: u8) -> String {
        format!("{}/{}/{mode}/{topic}/{ordinal}/{attempt}/{turn}", self.run_id, qm.id)
    }

    fn accept(&self, q: Question) -> Result<Question, (RejectReason, String)> {
        validate_question(&q).map(|_| q).map_err(|v| {
            let detail = v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
            (RejectReason::Invalid, detail)
        })
    }

    fn attempt(
        &self,
        qm: &ModelSpec,
        mode: Mode,
        topic: &str,
        ordinal: u32,
        attempt: u32,
    ) -> Result<Attempt, ProviderError> {
        let first = match mode {
            Mode::Direct => prompts::direct_question(topic),
            Mode::Context => prompts::context_paragraph(topic),
            Mode::Sequential => prompts::sequential_questions(topic),
            Mode::CreativeDirect => prompts::creative_direct_question(topic),
            Mode::CreativeContext => prompts::creative_story(topic),
        };
        let mut messages = vec![ChatMessage::user(first)];
        let replay = self.replay(qm, mode, topic, ordinal, attempt, 1);
        let raw = self.client.chat(qm, &self.request(qm, messages.clone()), Some(&replay))?;
        let rejected = |reason: RejectReason, detail: String, raw: &str| Attempt::Rejected {
            reason,
            detail,
            raw: raw.to_string(),
        };

        let (raw, context) = if mode.has_context() {
            let context = if mode.is_creative() {
                let story = raw.trim();
                if story.is_empty() {
                    return Ok(rejected(RejectReason::ContextParseFailure, "empty story".into(), &raw));
                }
                ContextParagraph { concept_name: topic.to_string(), paragraph: story.to_string() }
            } else {
                match parse_context(&raw) {
                    Ok((concept_name, paragraph)) => ContextParagraph { concept_name, paragraph },
                    Err(e) => return Ok(rejected(RejectReason::ContextParseFailure, e.to_string(), &raw)),
                }
            };
            messages.push(ChatMessage::assistant(raw));
            messages.push(ChatMessage::user(second_turn(mode)));
            let replay = self.replay(qm, mode, topic, ordinal, attempt, 2);
            let raw2 = self.client.chat(qm, &self.request(qm, messages), Some(&replay))?;
            (raw2, Some(context))
        } else {
            (raw, None)
        };

        if mode == Mode::Sequential {
            return Ok(match parse_sequential(&raw, self.strictness) {
                Ok(blocks) => {
                    let mut out = Vec::with_capacity(5);
                    for (i, b) in blocks.into_iter().enumerate() {
                        let q = Question::new(
                            &qm.id,
                            mode,
                            topic,
                            ordinal,
                            b.statement,
                            b.choices,
                            b.correct_label,
                            None,
                            Some(i as u8 + 1),
                            raw.clone(),
                        );
                        match self.accept(q) {
                            Ok(q) => out.push(q),
                            Err((reason, detail)) => return Ok(rejected(reason, detail, &raw)),
                        }
                    }
                    Attempt::Accepted(out)
                }
                Err(e) => {
                    let reason = match e {
                        BatchFailure::WrongCount { .. } => RejectReason::BadBatch,
                        BatchFailure::Block { reason, .. } => reason.into(),
                    };
                    rejected(reason, e.to_string(), &raw)
                }
            });
        }

        Ok(match parse_mcq_block(&raw, self.strictness) {
            Ok(b) => {
                let q = Question::new(
                    &qm.id,
                    mode,
                    topic,
                    ordinal,
                    b.statement,
                    b.choices,
                    b.correct_label,
                    context,
                    None,
                    raw.clone(),
                );
                match self.accept(q) {
                    Ok(q) => Attempt::Accepted(vec![q]),
                    Err((reason, detail)) => rejected(reason, detail, &raw),
                }
            }
            Err(f) => rejected(f.into(), f.to_string(), &raw),
        })
    }

    /// Runs one slot to acceptance or exhaustion.
    pub fn slot(&self, qm: &ModelSpec, mode: Mode, topic: &str, ordinal: u32) -> Result<SlotOutcome, ProviderError> {
        let mut out = SlotOutcome::default();
        for attempt in 0..=self.regen_budget {
            match self.attempt(qm, mode, topic, ordinal, attempt)? {
                Attempt::Accepted(qs) => {
                    out.questions = qs;
                    return Ok(out);
                }
                Attempt::Rejected { reason, detail, raw } => {
                    log::debug!("{} {mode} {topic} #{ordinal} attempt {attempt}: {detail}", qm.id);
                    out.rejects.push(RejectRecord {
                        qm_id: qm.id.clone(),
                        mode,
                        topic: topic.to_string(),
                        ordinal,
                        attempt,
                        reason,
                        detail,
                        raw_generation: raw,
                        exhausted: attempt == self.regen_budget,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Generates every slot of a task in order, without persistence.
    pub fn generate(&self, task: &GenerationTask) -> Result<Generated, GenError> {
        task.check()?;
        let mut g = Generated::default();
        for ordinal in 0..task.count {
            let s = self.slot(&task.qm, task.mode, &task.topic, ordinal)?;
            if s.exhausted() {
                g.exhausted_slots += 1;
            }
            g.questions.extend(s.questions);
            g.rejects.extend(s.rejects);
        }
        if g.exhausted_slots > 0 {
            return Err(GenError::GenerationExhausted {
                exhausted: g.exhausted_slots,
                slots: task.count as usize,
                allowed: 0,
            });
        }
        Ok(g)
    }

    pub fn generate_direct(&self, task: &GenerationTask) -> Result<Generated, GenError> {
        self.require_mode(task, &[Mode::Direct, Mode::CreativeDirect])?;
        self.generate(task)
    }

    pub fn generate_context(&self, task: &GenerationTask) -> Result<Generated, GenError> {
        self.require_mode(task, &[Mode::Context, Mode::CreativeContext])?;
        self.generate(task)
    }

    pub fn generate_sequential(&self, task: &GenerationTask) -> Result<Generated, GenError> {
        self.require_mode(task, &[Mode::Sequential])?;
        self.generate(task)
    }

    fn require_mode(&self, task: &GenerationTask, modes: &[Mode]) -> Result<(), GenError> {
        if modes.contains(&task.mode) {
            Ok(())
        } else {
            Err(GenError::InvalidTask(format!("mode {} not handled here", task.mode)))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenerationSummary {
    pub slots: usize,
    pub skipped: usize,
    pub generated_questions: usize,
    pub rejects: usize,
    pub exhausted_slots: usize,
}

/// Generates all pending slots of `tasks` into the store. Slots that already
/// hold a question or an exhausted reject are skipped, so re-running after an
/// interruption only fills the gaps.
pub fn run_generation(
    store: &RunStore,
    generator: &Generator<'_>,
    tasks: &[GenerationTask],
    concurrency: usize,
    max_reject_fraction: f64,
) -> Result<GenerationSummary, GenError> {
    for t in tasks {
        t.check()?;
    }
    let done: HashSet<SlotKey> = store.completed_slots();
    let mut pending = Vec::new();
    let mut summary = GenerationSummary::default();
    for t in tasks {
        for ordinal in 0..t.count {
            summary.slots += 1;
            let key = SlotKey { qm_id: t.qm.id.clone(), mode: t.mode, topic: t.topic.clone(), ordinal };
            if done.contains(&key) {
                summary.skipped += 1;
            } else {
                pending.push((t, ordinal));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(concurrency.max(1)).build().expect("thread pool");
    for chunk in pending.chunks(concurrency.max(1)) {
        let results: Vec<Result<SlotOutcome, ProviderError>> = pool.install(|| {
            use rayon::prelude::*;
            chunk.par_iter().map(|(t, ordinal)| generator.slot(&t.qm, t.mode, &t.topic, *ordinal)).collect()
        });
        let mut first_err = None;
        for r in results {
            match r {
                Ok(outcome) => {
                    for rej in &outcome.rejects {
                        store.append_reject(rej)?;
                    }
                    for q in &outcome.questions {
                        store.append_question(q)?;
                    }
                    summary.rejects += outcome.rejects.len();
                    summary.generated_questions += outcome.questions.len();
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
    let exhausted = store.exhausted_slot_count(tasks);
    summary.exhausted_slots = exhausted;
    let allowed = (max_reject_fraction * summary.slots as f64).floor() as usize;
    if exhausted > allowed {
        return Err(GenError::GenerationExhausted { exhausted, slots: summary.slots, allowed });
    }
    Ok(summary)
}
