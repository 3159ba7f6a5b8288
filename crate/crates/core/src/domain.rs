//! Domain types shared by every pipeline stage.
//!
//! Native labels (A-D, in the order the question model generated the choices)
//! are the canonical key everywhere. Presented letters only exist inside a
//! [`Presentation`].

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One of the four native choice labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    A,
    B,
    C,
    D,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::A, Label::B, Label::C, Label::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn letter(self) -> char {
        (b'A' + self as u8) as char
    }

    pub fn from_letter(c: char) -> Option<Label> {
        match c {
            'A' => Some(Label::A),
            'B' => Some(Label::B),
            'C' => Some(Label::C),
            'D' => Some(Label::D),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Question generation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Direct,
    Context,
    Sequential,
    CreativeDirect,
    CreativeContext,
}

impl Mode {
    pub const ALL: [Mode; 5] =
        [Mode::Direct, Mode::Context, Mode::Sequential, Mode::CreativeDirect, Mode::CreativeContext];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Direct => "direct",
            Mode::Context => "context",
            Mode::Sequential => "sequential",
            Mode::CreativeDirect => "creative_direct",
            Mode::CreativeContext => "creative_context",
        }
    }

    pub fn has_context(self) -> bool {
        matches!(self, Mode::Context | Mode::CreativeContext)
    }

    pub fn is_creative(self) -> bool {
        matches!(self, Mode::CreativeDirect | Mode::CreativeContext)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "direct" | "dq" => Ok(Mode::Direct),
            "context" | "cq" => Ok(Mode::Context),
            "sequential" => Ok(Mode::Sequential),
            "creative_direct" => Ok(Mode::CreativeDirect),
            "creative_context" => Ok(Mode::CreativeContext),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Chat,
    CompletionWithLogprobs,
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    QuestionModel,
    AnswerModel,
    Embedder,
    Scorer,
}

/// How a conversation is flattened into plain text for completion-style
/// scoring endpoints.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatTemplate {
    /// `User: {user}\n\nAssistant: {assistant}`
    #[default]
    Plain,
    Llama3,
    MistralInst,
    /// Free-form template with `{user}` and `{assistant}` placeholders.
    Custom(String),
}

impl ChatTemplate {
    /// Renders one user turn followed by a partial assistant turn.
    pub fn render(&self, user: &str, assistant_prefix: &str) -> String {
        match self {
            ChatTemplate::Plain => format!("User: {user}\n\nAssistant: {assistant_prefix}"),
            ChatTemplate::Llama3 => format!(
                "<|begin_of_text|><|start_header_id|>user<|end_header_id|>\n\n{user}<|eot_id|>\
                 <|start_header_id|>assistant<|end_header_id|>\n\n{assistant_prefix}"
            ),
            ChatTemplate::MistralInst => format!("<s>[INST] {user} [/INST] {assistant_prefix}"),
            ChatTemplate::Custom(t) => t.replace("{user}", user).replace("{assistant}", assistant_prefix),
        }
    }
}

/// A named model endpoint and its sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    pub endpoint_kind: EndpointKind,
    pub base_url: String,
    pub model_name: String,
    /// Explicit override. When absent, question generation samples at 1.0
    /// and answering runs greedy at 0.0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    pub role_tags: BTreeSet<Role>,
    #[serde(default)]
    pub family: String,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub chat_template: ChatTemplate,
}

fn default_max_tokens() -> u32 {
    1024
}

pub const QUESTION_TEMPERATURE: f64 = 1.0;
pub const ANSWER_TEMPERATURE: f64 = 0.0;

impl ModelSpec {
    pub fn has_role(&self, role: Role) -> bool {
        self.role_tags.contains(&role)
    }

    pub fn question_temperature(&self) -> f64 {
        self.temperature.unwrap_or(QUESTION_TEMPERATURE)
    }

    pub fn answer_temperature(&self) -> f64 {
        self.temperature.unwrap_or(ANSWER_TEMPERATURE)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextParagraph {
    pub concept_name: String,
    pub paragraph: String,
}

/// One generated imaginary multiple-choice question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub mode: Mode,
    pub topic: String,
    pub qm_id: String,
    /// Slot index within (qm, mode, topic); the batch index for sequential mode.
    pub ordinal: u32,
    pub statement: String,
    pub choices: Vec<String>,
    pub correct_label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<ContextParagraph>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_index: Option<u8>,
    pub raw_generation: String,
    pub char_length: usize,
}

/// Unicode scalar count of the statement plus all choices.
pub fn char_length(statement: &str, choices: &[String]) -> usize {
    statement.chars().count() + choices.iter().map(|c| c.chars().count()).sum::<usize>()
}

/// Content-addressed question id.
pub fn question_id(
    qm_id: &str,
    mode: Mode,
    topic: &str,
    raw_generation: &str,
    ordinal: u32,
    sequence_index: Option<u8>,
) -> String {
    let mut h = Sha256::new();
    for part in [qm_id, mode.as_str(), topic, raw_generation] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    h.update(ordinal.to_le_bytes());
    h.update([sequence_index.unwrap_or(0)]);
    let digest = h.finalize();
    format!("q{}", &hex::encode(digest)[..24])
}

impl Question {
    /// Builds a question with a derived id and char length.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        qm_id: &str,
        mode: Mode,
        topic: &str,
        ordinal: u32,
        statement: String,
        choices: Vec<String>,
        correct_label: Label,
        context: Option<ContextParagraph>,
        sequence_index: Option<u8>,
        raw_generation: String,
    ) -> Question {
        let question_id = question_id(qm_id, mode, topic, &raw_generation, ordinal, sequence_index);
        let char_length = char_length(&statement, &choices);
        Question {
            question_id,
            mode,
            topic: topic.to_string(),
            qm_id: qm_id.to_string(),
            ordinal,
            statement,
            choices,
            correct_label,
            context,
            sequence_index,
            raw_generation,
            char_length,
        }
    }

    pub fn choice(&self, label: Label) -> &str {
        &self.choices[label.index()]
    }

    pub fn recomputed_char_length(&self) -> usize {
        char_length(&self.statement, &self.choices)
    }

    /// Statement plus the four choices, one per line. Used for embeddings and
    /// word counts.
    pub fn full_text(&self) -> String {
        let mut s = self.statement.clone();
        for (label, choice) in Label::ALL.iter().zip(&self.choices) {
            s.push_str(&format!("\n{label}. {choice}"));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ChoiceCount(usize),
    EmptyChoice(Label),
    EmptyStatement,
    LabelOutOfRange,
    ContextMismatch { mode: Mode, has_context: bool },
    SequenceIndexMismatch { mode: Mode, index: Option<u8> },
    CharLength { stored: usize, recomputed: usize },
    Schema(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ChoiceCount(n) => write!(f, "choice count {n} ≠ 4"),
            Violation::EmptyChoice(l) => write!(f, "choice {l} is empty"),
            Violation::EmptyStatement => write!(f, "empty statement"),
            Violation::LabelOutOfRange => write!(f, "label out of range"),
            Violation::ContextMismatch { mode, has_context } => {
                write!(f, "context present={has_context} does not fit mode {mode}")
            }
            Violation::SequenceIndexMismatch { mode, index } => {
                write!(f, "sequence index {index:?} does not fit mode {mode}")
            }
            Violation::CharLength { stored, recomputed } => {
                write!(f, "char_length {stored} ≠ recomputed {recomputed}")
            }
            Violation::Schema(e) => write!(f, "schema: {e}"),
        }
    }
}

pub type ValidationResult = Result<(), Vec<Violation>>;

/// Checks the structural invariants of a question. Violations are data.
pub fn validate_question(q: &Question) -> ValidationResult {
    let mut v = Vec::new();
    if q.statement.trim().is_empty() {
        v.push(Violation::EmptyStatement);
    }
    if q.choices.len() != 4 {
        v.push(Violation::ChoiceCount(q.choices.len()));
    }
    for (i, c) in q.choices.iter().enumerate().take(4) {
        if c.trim().is_empty() {
            v.push(Violation::EmptyChoice(Label::ALL[i]));
        }
    }
    if q.correct_label.index() >= q.choices.len() {
        v.push(Violation::LabelOutOfRange);
    }
    if q.mode.has_context() != q.context.is_some() {
        v.push(Violation::ContextMismatch { mode: q.mode, has_context: q.context.is_some() });
    }
    let seq_ok = match (q.mode, q.sequence_index) {
        (Mode::Sequential, Some(i)) => (1..=5).contains(&i),
        (Mode::Sequential, None) => false,
        (_, idx) => idx.is_none(),
    };
    if !seq_ok {
        v.push(Violation::SequenceIndexMismatch { mode: q.mode, index: q.sequence_index });
    }
    let recomputed = q.recomputed_char_length();
    if recomputed != q.char_length {
        v.push(Violation::CharLength { stored: q.char_length, recomputed });
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Validates a raw JSON question record, including a correct label outside A-D.
pub fn validate_question_json(value: &serde_json::Value) -> ValidationResult {
    if let Some(l) = value.get("correct_label").and_then(|l| l.as_str()) {
        if l.chars().count() != 1 || Label::from_letter(l.chars().next().unwrap_or(' ')).is_none() {
            return Err(vec![Violation::LabelOutOfRange]);
        }
    }
    match serde_json::from_value::<Question>(value.clone()) {
        Ok(q) => validate_question(&q),
        Err(e) => Err(vec![Violation::Schema(e.to_string())]),
    }
}

/// Bijection from native labels to presented positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[Label; 4]", into = "[Label; 4]")]
pub struct Permutation([Label; 4]);

impl Permutation {
    pub const IDENTITY: Permutation = Permutation(Label::ALL);

    /// `presented[i]` is the letter under which native label `i` is shown.
    pub fn new(presented: [Label; 4]) -> Result<Permutation, String> {
        let mut seen = [false; 4];
        for l in presented {
            if std::mem::replace(&mut seen[l.index()], true) {
                return Err(format!("{presented:?} is not a bijection"));
            }
        }
        Ok(Permutation(presented))
    }

    pub fn presented(&self, native: Label) -> Label {
        self.0[native.index()]
    }

    pub fn native(&self, presented: Label) -> Label {
        let i = self.0.iter().position(|&l| l == presented).expect("bijection");
        Label::ALL[i]
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// All 24 permutations in lexicographic order.
    pub fn all() -> Vec<Permutation> {
        let mut out = Vec::with_capacity(24);
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for d in 0..4 {
                        let idx = [a, b, c, d];
                        if let Ok(p) = Permutation::new(idx.map(|i| Label::ALL[i])) {
                            out.push(p);
                        }
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<[Label; 4]> for Permutation {
    type Error = String;
    fn try_from(v: [Label; 4]) -> Result<Self, Self::Error> {
        Permutation::new(v)
    }
}

impl From<Permutation> for [Label; 4] {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

/// Which presentation variant an answer belongs to; part of the answer key so
/// shuffled, native-order and augmented runs coexist in one store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresentationKind {
    Shuffled,
    Native,
    ShuffledE,
    NativeE,
}

impl PresentationKind {
    pub fn from_flags(shuffle: bool, augment_e: bool) -> PresentationKind {
        match (shuffle, augment_e) {
            (true, false) => PresentationKind::Shuffled,
            (false, false) => PresentationKind::Native,
            (true, true) => PresentationKind::ShuffledE,
            (false, true) => PresentationKind::NativeE,
        }
    }

    pub fn augmented_e(self) -> bool {
        matches!(self, PresentationKind::ShuffledE | PresentationKind::NativeE)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PresentationKind::Shuffled => "shuffled",
            PresentationKind::Native => "native",
            PresentationKind::ShuffledE => "shuffled_e",
            PresentationKind::NativeE => "native_e",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Presentation {
    pub question_id: String,
    pub permutation: Permutation,
    pub shuffled: bool,
    pub augmented_e: bool,
    pub presented_text: String,
}

impl Presentation {
    pub fn kind(&self) -> PresentationKind {
        PresentationKind::from_flags(self.shuffled, self.augmented_e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "label", rename_all = "snake_case")]
pub enum Outcome {
    Selected(Label),
    SelectedE,
    Refused,
    ParseError,
}

impl Outcome {
    /// Answered in the sense of the answering rate: a letter was chosen.
    pub fn is_answered(self) -> bool {
        matches!(self, Outcome::Selected(_) | Outcome::SelectedE)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: String,
    pub am_id: String,
    pub presentation: Presentation,
    pub raw_response: String,
    pub outcome: Outcome,
    pub latency_ms: u64,
}

impl AnswerRecord {
    pub fn kind(&self) -> PresentationKind {
        self.presentation.kind()
    }

    pub fn is_correct(&self, correct: Label) -> bool {
        self.outcome == Outcome::Selected(correct)
    }
}

/// Correctness and answering rate for one (QM, AM, mode) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub qm_id: String,
    pub am_id: String,
    pub mode: Mode,
    /// Undefined when nothing was answered.
    pub kappa: Option<f64>,
    pub alpha: f64,
    pub n_total: usize,
    pub n_answered: usize,
    pub n_correct: usize,
    #[serde(default)]
    pub n_refused: usize,
    #[serde(default)]
    pub n_parse_error: usize,
    #[serde(default)]
    pub n_selected_e: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    InProgress,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactFile {
    pub path: String,
    pub sha256: String,
}

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub created_at: String,
    pub config_hash: String,
    pub rng_seed: u64,
    pub topics: Vec<String>,
    pub models: Vec<ModelSpec>,
    pub artifact_files: Vec<ArtifactFile>,
    pub status: RunStatus,
}
