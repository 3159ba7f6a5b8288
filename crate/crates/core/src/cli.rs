//! Run lifecycle behind the `iqa` binary: configuration, the four commands
//! and the report writer.
//!
//! Exit codes: 0 success, 1 configuration error, 2 provider failure, 3 data
//! integrity failure.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{self, EmbeddingRecord};
use crate::anspipeline::{answer_all, AnswerError, AnswerTask};
use crate::domain::{
    AnswerRecord, Label, Mode, ModelSpec, PresentationKind, Question, Role, RunManifest, RunStatus, SCHEMA_VERSION,
};
use crate::genpipeline::parse::Strictness;
use crate::genpipeline::{
    run_generation, GenError, GenerationSummary, GenerationTask, Generator, TopicSet, DEFAULT_COUNT,
    DEFAULT_REGEN_BUDGET, DEFAULT_SEQUENTIAL_BATCHES,
};
use crate::metrics::{self, fmt_opt, MetricMatrix};
use crate::probes::{self, FictionalityRecord, ProbeError, ProbeRecord, ScoreMethod};
use crate::providers::{
    Backend, ChatRequest, Client, HttpBackend, ProviderError, ResponseCache, RetryPolicy, ScoredCompletion, StubBackend,
};
use crate::store::{self, load_run, RunData, RunStore, StoreError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("provider failure: {0}")]
    Provider(String),
    #[error("data integrity failure: {0}")]
    Integrity(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Provider(_) => 2,
            CliError::Integrity(_) => 3,
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Integrity(e.to_string())
    }
}

impl From<ProviderError> for CliError {
    fn from(e: ProviderError) -> Self {
        CliError::Provider(e.to_string())
    }
}

impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        match e {
            GenError::UnknownTopic(_) | GenError::InvalidTask(_) => CliError::Config(e.to_string()),
            GenError::Store(s) => s.into(),
            GenError::Provider(_) | GenError::GenerationExhausted { .. } => CliError::Provider(e.to_string()),
        }
    }
}

impl From<AnswerError> for CliError {
    fn from(e: AnswerError) -> Self {
        match e {
            AnswerError::InvalidTask(_) => CliError::Config(e.to_string()),
            AnswerError::MissingQuestion(_) => CliError::Integrity(e.to_string()),
            AnswerError::Provider(p) => p.into(),
            AnswerError::Store(s) => s.into(),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        CliError::Provider(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Integrity(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    #[serde(default = "default_count")]
    pub direct: u32,
    #[serde(default = "default_count")]
    pub context: u32,
    /// Five-question batches.
    #[serde(default = "default_batches")]
    pub sequential: u32,
    #[serde(default = "default_count")]
    pub creative_direct: u32,
    #[serde(default = "default_count")]
    pub creative_context: u32,
}

fn default_count() -> u32 {
    DEFAULT_COUNT
}

fn default_batches() -> u32 {
    DEFAULT_SEQUENTIAL_BATCHES
}

impl Default for Counts {
    fn default() -> Self {
        Counts {
            direct: DEFAULT_COUNT,
            context: DEFAULT_COUNT,
            sequential: DEFAULT_SEQUENTIAL_BATCHES,
            creative_direct: DEFAULT_COUNT,
            creative_context: DEFAULT_COUNT,
        }
    }
}

impl Counts {
    pub fn get(&self, mode: Mode) -> u32 {
        match mode {
            Mode::Direct => self.direct,
            Mode::Context => self.context,
            Mode::Sequential => self.sequential,
            Mode::CreativeDirect => self.creative_direct,
            Mode::CreativeContext => self.creative_context,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topics {
    #[serde(default = "college")]
    pub college: Vec<String>,
    #[serde(default = "creative")]
    pub creative: Vec<String>,
}

fn college() -> Vec<String> {
    TopicSet::college_subjects().topics
}

fn creative() -> Vec<String> {
    TopicSet::creative_writing().topics
}

impl Default for Topics {
    fn default() -> Self {
        Topics { college: college(), creative: creative() }
    }
}

impl Topics {
    pub fn for_mode(&self, mode: Mode) -> TopicSet {
        if mode.is_creative() {
            TopicSet { name: crate::genpipeline::TopicSetName::CreativeWriting, topics: self.creative.clone() }
        } else {
            TopicSet { name: crate::genpipeline::TopicSetName::CollegeSubjects, topics: self.college.clone() }
        }
    }
}

fn default_seed() -> u64 {
    0
}
fn default_concurrency() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_reject_fraction() -> f64 {
    0.05
}
fn default_regen() -> u32 {
    DEFAULT_REGEN_BUDGET
}
fn default_timeout() -> u64 {
    120
}
fn default_modes() -> Vec<Mode> {
    vec![Mode::Direct, Mode::Context]
}

/// Contents of the TOML configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub topics: Topics,
    #[serde(default)]
    pub counts: Counts,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Response cache; relative paths resolve against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub strict_parse: bool,
    /// Count each question's pairing with itself in same-model similarity.
    #[serde(default = "default_true")]
    pub eq2_include_self: bool,
    #[serde(default = "default_reject_fraction")]
    pub max_reject_fraction: f64,
    #[serde(default = "default_regen")]
    pub regen_budget: u32,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: u64,
    /// Show the four choices in the perplexity context.
    #[serde(default)]
    pub perplexity_with_choices: bool,
    /// Scripted responses for models whose base_url starts with `stub:`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stub_fixture: Option<PathBuf>,
    /// Replaces the built-in stopword list for word counts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stopwords_file: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Config {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Config, CliError> {
        let mut c: Config = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        c.base_dir = base_dir.into();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config, CliError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Config::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let err = |m: String| Err(CliError::Config(m));
        let mut ids = HashSet::new();
        for m in &self.models {
            if !ids.insert(m.id.as_str()) {
                return err(format!("duplicate model id {}", m.id));
            }
            if m.family.trim().is_empty() {
                return err(format!("model {} has no family", m.id));
            }
            if m.temperature.is_some_and(|t| t.is_nan() || t < 0.0) {
                return err(format!("model {} has a negative temperature", m.id));
            }
            if m.max_tokens == 0 {
                return err(format!("model {} has max_tokens = 0", m.id));
            }
        }
        if !self.models.iter().any(|m| m.has_role(Role::QuestionModel)) {
            return err("no question model configured".into());
        }
        if !self.models.iter().any(|m| m.has_role(Role::AnswerModel)) {
            return err("no answer model configured".into());
        }
        if self.concurrency == 0 {
            return err("concurrency must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.max_reject_fraction) {
            return err("max_reject_fraction must be in [0, 1]".into());
        }
        if self.topics.college.is_empty() && self.topics.creative.is_empty() {
            return err("no topics configured".into());
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// sha256 of the canonical JSON form of the configuration, leaving out
    /// knobs that do not change results (parallelism, retries, cache).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        for k in OPERATIONAL_KEYS {
            obj.remove(k);
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn models_with(&self, role: Role) -> Vec<&ModelSpec> {
        self.models.iter().filter(|m| m.has_role(role)).collect()
    }

    pub fn model(&self, id: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.id == id)
    }
}

const OPERATIONAL_KEYS: [&str; 5] = ["concurrency", "cache_dir", "retry", "request_timeout_secs", "stub_fixture"];

/// Deterministic run id for a configuration and seed.
pub fn run_id(config_hash: &str, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(config_hash.as_bytes());
    h.update(seed.to_le_bytes());
    format!("run-{}", &hex::encode(h.finalize())[..12])
}

/// Command-line overrides applied on top of the configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub modes: Option<Vec<Mode>>,
    pub scale: Option<f64>,
    pub seed: Option<u64>,
    pub strict_parse: bool,
    pub concurrency: Option<usize>,
}

impl Overrides {
    fn concurrency(&self, c: &Config) -> usize {
        self.concurrency.unwrap_or(c.concurrency).max(1)
    }

    fn modes(&self, c: &Config) -> Vec<Mode> {
        self.modes.clone().unwrap_or_else(|| c.modes.clone())
    }

    fn count(&self, c: &Config, mode: Mode) -> u32 {
        let n = c.counts.get(mode);
        match self.scale {
            Some(s) => ((n as f64 * s).round() as u32).max(1),
            None => n,
        }
    }
}

/// Dispatches `stub:` models to the scripted backend and the rest to HTTP.
pub struct RoutingBackend {
    stub: Option<StubBackend>,
    http: HttpBackend,
}

impl RoutingBackend {
    fn pick(&self, spec: &ModelSpec) -> Result<&dyn Backend, ProviderError> {
        if spec.base_url.starts_with("stub:") {
            self.stub.as_ref().map(|s| s as &dyn Backend).ok_or_else(|| {
                ProviderError::Fixture(format!("{} is a stub model but no stub_fixture is set", spec.id))
            })
        } else {
            Ok(&self.http)
        }
    }
}

impl Backend for RoutingBackend {
    fn chat(&self, spec: &ModelSpec, req: &ChatRequest) -> Result<String, ProviderError> {
        self.pick(spec)?.chat(spec, req)
    }

    fn score_completion(
        &self,
        spec: &ModelSpec,
        context: &str,
        continuation: &str,
    ) -> Result<ScoredCompletion, ProviderError> {
        self.pick(spec)?.score_completion(spec, context, continuation)
    }

    fn next_tokens(&self, spec: &ModelSpec, context: &str, top_k: usize) -> Result<Vec<(String, f64)>, ProviderError> {
        self.pick(spec)?.next_tokens(spec, context, top_k)
    }

    fn embed(&self, spec: &ModelSpec, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        self.pick(spec)?.embed(spec, texts)
    }
}

/// Client for a configuration, caching under `cache_dir` or `<run>/cache`.
pub fn build_client(config: &Config, run_dir: &Path, concurrency: usize) -> Result<Client, CliError> {
    let stub = match &config.stub_fixture {
        Some(p) => Some(StubBackend::from_file(config.resolve(p)).map_err(|e| CliError::Config(e.to_string()))?),
        None => None,
    };
    let http = HttpBackend::new(Duration::from_secs(config.request_timeout_secs), concurrency)?;
    let cache_dir = config.cache_dir.as_ref().map(|p| config.resolve(p)).unwrap_or_else(|| run_dir.join("cache"));
    let cache = ResponseCache::open(&cache_dir).map_err(io_err(&cache_dir))?;
    Ok(Client::new(Arc::new(RoutingBackend { stub, http })).with_cache(cache).with_retry(config.retry.clone()))
}

/// Opens the run at `run_dir`, creating it on first use. An existing run must
/// come from the same configuration and seed.
pub fn open_or_create_run(config: &Config, run_dir: &Path, seed: u64) -> Result<RunStore, CliError> {
    let config_hash = config.hash();
    if run_dir.join(store::MANIFEST).exists() {
        let store = RunStore::open(run_dir)?;
        let m = store.manifest();
        if m.config_hash != config_hash || m.rng_seed != seed {
            return Err(CliError::Config(format!(
                "{} was created from a different configuration or seed",
                run_dir.display()
            )));
        }
        return Ok(store);
    }
    let topics: BTreeSet<String> = config.topics.college.iter().chain(&config.topics.creative).cloned().collect();
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        run_id: run_id(&config_hash, seed),
        created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        config_hash,
        rng_seed: seed,
        topics: topics.into_iter().collect(),
        models: config.models.clone(),
        artifact_files: vec![],
        status: RunStatus::InProgress,
    };
    Ok(RunStore::create(run_dir, manifest)?)
}

fn open_existing(config: &Config, run_dir: &Path) -> Result<RunStore, CliError> {
    if !run_dir.join(store::MANIFEST).exists() {
        return Err(CliError::Config(format!("no run at {}; run generate first", run_dir.display())));
    }
    let store = RunStore::open(run_dir)?;
    if store.manifest().config_hash != config.hash() {
        return Err(CliError::Config(format!("{} was created from a different configuration", run_dir.display())));
    }
    Ok(store)
}

/// Generates every pending (qm, mode, topic) slot.
pub fn cmd_generate(config: &Config, run_dir: &Path, o: &Overrides) -> Result<GenerationSummary, CliError> {
    let seed = o.seed.unwrap_or(config.seed);
    let store = open_or_create_run(config, run_dir, seed)?;
    let concurrency = o.concurrency(config);
    let client = build_client(config, run_dir, concurrency)?;
    let mut tasks = Vec::new();
    for mode in o.modes(config) {
        let topics = config.topics.for_mode(mode);
        for qm in config.models_with(Role::QuestionModel) {
            for topic in &topics.topics {
                tasks.push(GenerationTask { qm: qm.clone(), mode, topic: topic.clone(), count: o.count(config, mode) });
            }
        }
    }
    let generator = Generator {
        client: &client,
        run_id: store.manifest().run_id,
        strictness: if o.strict_parse || config.strict_parse { Strictness::Strict } else { Strictness::Tolerant },
        regen_budget: config.regen_budget,
    };
    let summary = run_generation(&store, &generator, &tasks, concurrency, config.max_reject_fraction)?;
    log::info!(
        "generated {} questions over {} slots ({} already done, {} rejects, {} exhausted)",
        summary.generated_questions,
        summary.slots,
        summary.skipped,
        summary.rejects,
        summary.exhausted_slots
    );
    Ok(summary)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AnswerFlags {
    /// Also run a pass with the choices in native order.
    pub native: bool,
    pub augment_e: bool,
}

fn questions_in(store: &RunStore, modes: &[Mode]) -> Vec<Question> {
    store.questions().into_iter().filter(|q| modes.contains(&q.mode)).collect()
}

/// Answers all stored questions of the selected modes with every AM.
/// Returns the number of new records.
pub fn cmd_answer(config: &Config, run_dir: &Path, flags: AnswerFlags, o: &Overrides) -> Result<usize, CliError> {
    let store = open_existing(config, run_dir)?;
    let seed = store.manifest().rng_seed;
    let concurrency = o.concurrency(config);
    let client = build_client(config, run_dir, concurrency)?;
    let modes = o.modes.clone().unwrap_or_else(|| Mode::ALL.to_vec());
    let ids: Vec<String> = questions_in(&store, &modes).into_iter().map(|q| q.question_id).collect();
    let mut passes = vec![true];
    if flags.native {
        passes.push(false);
    }
    let mut added = 0;
    for shuffle in passes {
        for am in config.models_with(Role::AnswerModel) {
            let task = AnswerTask {
                am: am.clone(),
                question_ids: ids.clone(),
                shuffle,
                augment_e: flags.augment_e,
                rng_seed: seed,
            };
            let s = answer_all(&store, &client, &task, concurrency)?;
            log::info!("{} ({}): {} answered, {} already done", am.id, task.kind().as_str(), s.answered, s.skipped);
            added += s.answered;
        }
    }
    Ok(added)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Perplexity,
    Letters,
    Fictionality,
    ChoiceE,
    Embed,
}

impl std::str::FromStr for ProbeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "perplexity" => ProbeKind::Perplexity,
            "letters" => ProbeKind::Letters,
            "fictionality" => ProbeKind::Fictionality,
            "choice-e" | "choice_e" => ProbeKind::ChoiceE,
            "embed" | "embeddings" => ProbeKind::Embed,
            _ => return Err(format!("unknown probe '{s}'")),
        })
    }
}

/// Maps `f` over `items` `concurrency` at a time, keeping order, and stops
/// at the first chunk containing an error.
fn chunked<T: Sync, R: Send, E: Send>(
    items: &[T],
    concurrency: usize,
    f: impl Fn(&T) -> Result<R, E> + Sync,
    mut sink: impl FnMut(R) -> Result<(), CliError>,
) -> Result<(), CliError>
where
    CliError: From<E>,
{
    let pool = rayon::ThreadPoolBuilder::new().num_threads(concurrency).build().expect("thread pool");
    for chunk in items.chunks(concurrency) {
        let results: Vec<Result<R, E>> = pool.install(|| {
            use rayon::prelude::*;
            chunk.par_iter().map(&f).collect()
        });
        let mut first_err = None;
        for r in results {
            match r {
                Ok(v) => sink(v)?,
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_err {
            return Err(e.into());
        }
    }
    Ok(())
}

/// Runs one probe over the stored questions. Returns the number of new
/// records.
pub fn cmd_probe(config: &Config, run_dir: &Path, kind: ProbeKind, o: &Overrides) -> Result<usize, CliError> {
    let store = open_existing(config, run_dir)?;
    let concurrency = o.concurrency(config);
    let client = build_client(config, run_dir, concurrency)?;
    let modes = o.modes.clone().unwrap_or_else(|| Mode::ALL.to_vec());
    let questions = questions_in(&store, &modes);
    let mut added = 0usize;
    match kind {
        ProbeKind::Perplexity | ProbeKind::Letters => {
            let scorers = config.models_with(Role::Scorer);
            if scorers.is_empty() {
                return Err(CliError::Config("no scorer model configured".into()));
            }
            let method =
                if kind == ProbeKind::Perplexity { ScoreMethod::Perplexity } else { ScoreMethod::LetterProbability };
            for scorer in scorers {
                let todo: Vec<&Question> = questions
                    .iter()
                    .filter(|q| {
                        !store.has_probe(&(method.as_str().to_string(), q.question_id.clone(), scorer.id.clone()))
                    })
                    .collect();
                chunked(
                    &todo,
                    concurrency,
                    |q| match kind {
                        ProbeKind::Perplexity => {
                            probes::score_by_perplexity(&client, scorer, q, config.perplexity_with_choices)
                        }
                        _ => probes::score_by_letter_probability(&client, scorer, q),
                    },
                    |score| {
                        store.append_probe(&ProbeRecord::ChoiceScore(score))?;
                        added += 1;
                        Ok(())
                    },
                )?;
            }
        }
        ProbeKind::Fictionality => {
            let with_context: Vec<&Question> = questions.iter().filter(|q| q.mode == Mode::Context).collect();
            if with_context.is_empty() {
                log::warn!("no context questions; nothing to query");
                return Ok(0);
            }
            for am in config.models_with(Role::AnswerModel) {
                let todo: Vec<&Question> = with_context
                    .iter()
                    .copied()
                    .filter(|q| !store.has_probe(&("fictionality".into(), q.question_id.clone(), am.id.clone())))
                    .collect();
                chunked(
                    &todo,
                    concurrency,
                    |q| probes::query_fictionality(&client, am, q),
                    |rec| {
                        if let Some(r) = rec {
                            store.append_probe(&ProbeRecord::Fictionality(r))?;
                            added += 1;
                        }
                        Ok(())
                    },
                )?;
            }
        }
        ProbeKind::ChoiceE => {
            let ids: Vec<String> = questions.iter().map(|q| q.question_id.clone()).collect();
            let seed = store.manifest().rng_seed;
            for am in config.models_with(Role::AnswerModel) {
                added += probes::run_choice_e(&store, &client, am, ids.clone(), seed, concurrency)?.answered;
            }
        }
        ProbeKind::Embed => {
            let embedders = config.models_with(Role::Embedder);
            if embedders.is_empty() {
                return Err(CliError::Config("no embedder model configured".into()));
            }
            for emb in embedders {
                let todo: Vec<&Question> =
                    questions.iter().filter(|q| !store.has_embedding(&q.question_id, &emb.id)).collect();
                let batches: Vec<&[&Question]> = todo.chunks(EMBED_BATCH).collect();
                chunked(
                    &batches,
                    concurrency,
                    |batch| {
                        let texts: Vec<String> = batch.iter().map(|q| q.full_text()).collect();
                        client.embed(emb, &texts).map(|vs| {
                            batch
                                .iter()
                                .zip(vs)
                                .map(|(q, v)| EmbeddingRecord {
                                    question_id: q.question_id.clone(),
                                    embedder_id: emb.id.clone(),
                                    vector: v,
                                })
                                .collect::<Vec<_>>()
                        })
                    },
                    |recs| {
                        for r in recs {
                            store.append_embedding(&r)?;
                            added += 1;
                        }
                        Ok(())
                    },
                )?;
            }
        }
    }
    Ok(added)
}

const EMBED_BATCH: usize = 32;

#[derive(Debug, Clone, Default)]
pub struct ReportOptions {
    pub eq2_include_self: bool,
    pub stopwords: Option<HashSet<String>>,
}

impl ReportOptions {
    pub fn from_config(config: &Config) -> Result<ReportOptions, CliError> {
        let stopwords = match &config.stopwords_file {
            Some(p) => {
                let p = config.resolve(p);
                let text = fs::read_to_string(&p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Some(text.split_whitespace().map(str::to_lowercase).collect())
            }
            None => None,
        };
        Ok(ReportOptions { eq2_include_self: config.eq2_include_self, stopwords })
    }
}

/// Files written under `reports/`.
pub const REPORT_FILES: [&str; 16] = [
    "matrix.csv",
    "topic_breakdown.csv",
    "native_delta.csv",
    "length_ranks.csv",
    "similarity.csv",
    "warmup_order.csv",
    "warmup_length.csv",
    "word_freq.csv",
    "embeddings.tsv",
    "embeddings_absent.txt",
    "choice_scores.csv",
    "fictionality.csv",
    "probe_rates.csv",
    "rejects.csv",
    "summary.txt",
    "summary.json",
];

struct Csv(csv::Writer<Vec<u8>>);

impl Csv {
    fn new(header: &[&str]) -> Csv {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).expect("in-memory write");
        Csv(w)
    }

    fn row<I: IntoIterator<Item = S>, S: AsRef<[u8]>>(&mut self, r: I) {
        self.0.write_record(r).expect("in-memory write");
    }

    fn bytes(self) -> Vec<u8> {
        self.0.into_inner().expect("in-memory flush")
    }
}

fn kinds_present(answers: &[AnswerRecord]) -> Vec<PresentationKind> {
    let present: HashSet<PresentationKind> = answers.iter().map(AnswerRecord::kind).collect();
    [PresentationKind::Shuffled, PresentationKind::Native, PresentationKind::ShuffledE, PresentationKind::NativeE]
        .into_iter()
        .filter(|k| present.contains(k))
        .collect()
}

fn modes_present(questions: &[Question]) -> Vec<Mode> {
    let present: HashSet<Mode> = questions.iter().map(|q| q.mode).collect();
    Mode::ALL.into_iter().filter(|m| present.contains(m)).collect()
}

fn cell_fields(c: &crate::domain::MetricCell) -> [String; 5] {
    [fmt_opt(c.kappa), c.alpha.to_string(), c.n_total.to_string(), c.n_answered.to_string(), c.n_correct.to_string()]
}

/// Report tables and summary as (file name, bytes), computed from the run
/// data alone.
pub fn render_reports(data: &RunData, opts: &ReportOptions) -> Vec<(String, Vec<u8>)> {
    let models = &data.manifest.models;
    let qmap = data.question_map();
    let qms: Vec<String> = models.iter().filter(|m| m.has_role(Role::QuestionModel)).map(|m| m.id.clone()).collect();
    let modes = modes_present(&data.questions);
    let kinds = kinds_present(&data.answers);
    let all_q: Vec<&Question> = data.questions.iter().collect();
    let mut out = Vec::new();

    // matrices
    let mut matrices: Vec<MetricMatrix> = Vec::new();
    let mut matrix_w = csv::Writer::from_writer(Vec::new());
    matrix_w.write_record(metrics::MATRIX_HEADER).expect("in-memory write");
    for &kind in &kinds {
        for &mode in &modes {
            let m = metrics::matrix_from_records(&qmap, &data.answers, mode, kind, models);
            if m.cells.is_empty() {
                continue;
            }
            metrics::write_matrix_csv(&mut matrix_w, &m, models).expect("in-memory write");
            matrices.push(m);
        }
    }
    out.push(("matrix.csv".into(), matrix_w.into_inner().expect("flush")));

    let mut topics =
        Csv::new(&["am", "topic", "mode", "presentation", "kappa", "alpha", "n_total", "n_answered", "n_correct"]);
    for &kind in &kinds {
        for &mode in &modes {
            for ((am, topic), c) in metrics::topic_breakdown(&qmap, &data.answers, mode, kind).cells {
                let mut r = vec![am, topic, mode.as_str().into(), kind.as_str().into()];
                r.extend(cell_fields(&c));
                topics.row(r);
            }
        }
    }
    out.push(("topic_breakdown.csv".into(), topics.bytes()));

    let mut delta = Csv::new(&["qm", "am", "mode", "d_kappa", "d_alpha"]);
    for &mode in &modes {
        let find = |k: PresentationKind| matrices.iter().find(|m| m.mode == mode && m.kind == k);
        if let (Some(s), Some(n)) = (find(PresentationKind::Shuffled), find(PresentationKind::Native)) {
            match metrics::native_order_delta(s, n) {
                Ok(cells) => {
                    for d in cells {
                        delta.row([d.qm_id, d.am_id, mode.as_str().into(), fmt_opt(d.d_kappa), d.d_alpha.to_string()]);
                    }
                }
                Err(e) => log::warn!("native delta for {mode}: {e}"),
            }
        }
    }
    out.push(("native_delta.csv".into(), delta.bytes()));

    let mut ranks = Csv::new(&["qm", "mode", "n", "rank1", "rank2", "rank3", "rank4"]);
    let mut rank_dists = Vec::new();
    for &mode in &modes {
        for qm in &qms {
            let qs: Vec<&Question> = all_q.iter().copied().filter(|q| q.mode == mode && &q.qm_id == qm).collect();
            if let Some(d) = analysis::length_rank_distribution(qm, mode, &qs) {
                let mut r = vec![qm.clone(), mode.as_str().into(), d.n.to_string()];
                r.extend(d.fractions.iter().map(|f| f.to_string()));
                ranks.row(r);
                rank_dists.push(d);
            }
        }
    }
    out.push(("length_ranks.csv".into(), ranks.bytes()));

    // similarity and embedding export, per embedder
    let embedders: Vec<String> = {
        let mut seen = BTreeSet::new();
        data.embeddings.iter().filter(|e| seen.insert(e.embedder_id.clone())).map(|e| e.embedder_id.clone()).collect()
    };
    let mut sim = Csv::new(&["qm_1", "qm_2", "mode", "similarity", "diagonal", "embedder", "include_self"]);
    let mut tsv = String::from("embedder\tquestion_id\ttopic\tqm\tmode\tvector\n");
    let mut absent_lines = String::new();
    for emb in &embedders {
        let e = data.embeddings_from(emb);
        for &mode in &modes {
            match analysis::similarity_matrix(&all_q, &e, &qms, mode, opts.eq2_include_self) {
                Ok(entries) => {
                    for s in entries {
                        sim.row([
                            s.qm_1,
                            s.qm_2,
                            mode.as_str().into(),
                            s.similarity.to_string(),
                            u8::from(s.diagonal).to_string(),
                            emb.clone(),
                            u8::from(opts.eq2_include_self).to_string(),
                        ]);
                    }
                }
                Err(err) => log::warn!("similarity for {mode} with {emb}: {err}"),
            }
        }
        let (rows, absent) = analysis::export_embeddings(&all_q, &e, None);
        for line in rows.lines().skip(1) {
            tsv.push_str(&format!("{emb}\t{line}\n"));
        }
        for id in absent {
            absent_lines.push_str(&format!("{emb}\t{id}\n"));
        }
    }
    out.push(("similarity.csv".into(), sim.bytes()));
    out.push(("embeddings.tsv".into(), tsv.into_bytes()));
    out.push(("embeddings_absent.txt".into(), absent_lines.into_bytes()));

    // warm-up curves
    let rank_cols = |d: Option<&analysis::LengthRankDistribution>| -> Vec<String> {
        match d {
            Some(d) => d.fractions.iter().map(|f| f.to_string()).collect(),
            None => vec![String::new(); 4],
        }
    };
    let warm_header = [
        "mode",
        "presentation",
        "am",
        "group",
        "kappa",
        "alpha",
        "n_total",
        "n_answered",
        "n_correct",
        "rank1",
        "rank2",
        "rank3",
        "rank4",
    ];
    let mut order = Csv::new(&warm_header);
    let mut length = Csv::new(&warm_header);
    for &kind in &kinds {
        if modes.contains(&Mode::Sequential) {
            let w = analysis::warmup_by_order(&qmap, &data.answers, kind);
            for ((am, g), c) in &w.cells {
                let mut r = vec!["sequential".to_string(), kind.as_str().into(), am.clone(), g.to_string()];
                r.extend(cell_fields(c));
                r.extend(rank_cols(w.length_ranks.get(g)));
                order.row(r);
            }
        }
        for &mode in &modes {
            let w = analysis::warmup_by_length(mode, &all_q, &qmap, &data.answers, kind);
            for ((am, g), c) in &w.cells {
                let mut r = vec![mode.as_str().to_string(), kind.as_str().into(), am.clone(), g.to_string()];
                r.extend(cell_fields(c));
                r.extend(rank_cols(w.length_ranks.get(g)));
                length.row(r);
            }
        }
    }
    out.push(("warmup_order.csv".into(), order.bytes()));
    out.push(("warmup_length.csv".into(), length.bytes()));

    let stop = opts.stopwords.clone().unwrap_or_else(analysis::default_stopwords);
    let mut words = Csv::new(&["mode", "term", "count"]);
    for &mode in &modes {
        let texts: Vec<String> = all_q.iter().filter(|q| q.mode == mode).map(|q| q.full_text()).collect();
        for (term, n) in analysis::word_frequency(&texts, &stop) {
            words.row([mode.as_str().to_string(), term, n.to_string()]);
        }
    }
    out.push(("word_freq.csv".into(), words.bytes()));

    // probes
    let mut scores = Csv::new(&[
        "question_id",
        "qm",
        "mode",
        "scorer",
        "method",
        "score_a",
        "score_b",
        "score_c",
        "score_d",
        "argbest",
        "correct_label",
    ]);
    let mut fict = Csv::new(&["question_id", "am", "topic", "verdict"]);
    let mut fict_records: Vec<&FictionalityRecord> = Vec::new();
    for p in &data.probes {
        match p {
            ProbeRecord::ChoiceScore(c) => {
                let (qm, mode, correct) = qmap
                    .get(&c.question_id)
                    .map(|q| (q.qm_id.clone(), q.mode.as_str().to_string(), q.correct_label.to_string()))
                    .unwrap_or_default();
                let mut r = vec![c.question_id.clone(), qm, mode, c.scorer_id.clone(), c.method.as_str().into()];
                r.extend(c.scores.iter().map(|s| s.to_string()));
                r.push(c.argbest.to_string());
                r.push(correct);
                scores.row(r);
            }
            ProbeRecord::Fictionality(f) => {
                fict.row([&f.question_id, &f.am_id, &f.topic, f.verdict.as_str()]);
                fict_records.push(f);
            }
        }
    }
    out.push(("choice_scores.csv".into(), scores.bytes()));
    out.push(("fictionality.csv".into(), fict.bytes()));

    let ams: Vec<String> = models.iter().filter(|m| m.has_role(Role::AnswerModel)).map(|m| m.id.clone()).collect();
    let mut rates_csv = Csv::new(&[
        "am",
        "n_answered_e",
        "n_selected_e",
        "e_selection_rate",
        "n_no",
        "n_yes",
        "n_unparseable",
        "detection_rate",
    ]);
    let mut rates = BTreeMap::new();
    for am in &ams {
        let e: Vec<AnswerRecord> =
            data.answers.iter().filter(|a| &a.am_id == am && a.presentation.augmented_e).cloned().collect();
        let f: Vec<FictionalityRecord> = fict_records.iter().filter(|f| &f.am_id == am).map(|f| (*f).clone()).collect();
        if e.is_empty() && f.is_empty() {
            continue;
        }
        let r = metrics::probe_rates(&e, &f);
        rates_csv.row([
            am.clone(),
            r.n_answered.to_string(),
            r.n_selected_e.to_string(),
            fmt_opt(r.e_selection_rate),
            r.n_no.to_string(),
            r.n_yes.to_string(),
            r.n_unparseable.to_string(),
            fmt_opt(r.fictionality_detection_rate),
        ]);
        rates.insert(am.clone(), r);
    }
    out.push(("probe_rates.csv".into(), rates_csv.bytes()));

    let mut rej = Csv::new(&["qm", "mode", "topic", "ordinal", "attempt", "reason", "exhausted"]);
    for r in &data.rejects {
        rej.row([
            r.qm_id.clone(),
            r.mode.as_str().into(),
            r.topic.clone(),
            r.ordinal.to_string(),
            r.attempt.to_string(),
            serde_json::to_value(r.reason).expect("reason").as_str().unwrap_or_default().to_string(),
            u8::from(r.exhausted).to_string(),
        ]);
    }
    out.push(("rejects.csv".into(), rej.bytes()));

    out.push(("summary.txt".into(), summary_text(data, &matrices, &rank_dists, &rates).into_bytes()));
    let mut js = serde_json::to_string_pretty(&summary_json(data, &matrices, &rank_dists, &rates)).expect("json");
    js.push('\n');
    out.push(("summary.json".into(), js.into_bytes()));
    out
}

fn f3(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

fn summary_text(
    data: &RunData,
    matrices: &[MetricMatrix],
    ranks: &[analysis::LengthRankDistribution],
    rates: &BTreeMap<String, metrics::ProbeRates>,
) -> String {
    let mut s = format!("run {}\n", data.manifest.run_id);
    s.push_str(&format!(
        "questions {}  rejects {}  answers {}  probes {}  embeddings {}\n",
        data.questions.len(),
        data.rejects.len(),
        data.answers.len(),
        data.probes.len(),
        data.embeddings.len()
    ));
    for m in matrices {
        s.push_str(&format!(
            "\n[{} / {}] mean kappa {}  mean alpha {}\n",
            m.mode,
            m.kind.as_str(),
            f3(m.overall.kappa),
            f3(m.overall.alpha)
        ));
        for qm in &m.qms {
            let avg = m.row_avg[qm];
            s.push_str(&format!("  qm {qm}: kappa {}  alpha {}", f3(avg.kappa), f3(avg.alpha)));
            let top = &m.top4[qm];
            if !top.is_empty() {
                s.push_str(&format!("  top4 {}", top.join(", ")));
            }
            s.push('\n');
            for am in &m.ams {
                if let Some(c) = m.cell(qm, am) {
                    s.push_str(&format!(
                        "    {am}: kappa {}  alpha {:.3}  ({}/{} correct, {} refused, {} unparsed)\n",
                        f3(c.kappa),
                        c.alpha,
                        c.n_correct,
                        c.n_answered,
                        c.n_refused,
                        c.n_parse_error
                    ));
                }
            }
        }
        for am in &m.ams {
            let avg = m.col_avg[am];
            s.push_str(&format!("  am {am}: kappa {}  alpha {}\n", f3(avg.kappa), f3(avg.alpha)));
        }
        if !m.missing.is_empty() {
            let pairs: Vec<String> = m.missing.iter().map(|(q, a)| format!("{q}/{a}")).collect();
            s.push_str(&format!("  missing pairs: {}\n", pairs.join(", ")));
        }
    }
    if !ranks.is_empty() {
        s.push_str("\nlength rank of the correct choice (shortest .. longest)\n");
        for d in ranks {
            let f: Vec<String> = d.fractions.iter().map(|x| format!("{x:.3}")).collect();
            s.push_str(&format!("  {} {}: {}\n", d.qm_id, d.mode, f.join(" ")));
        }
    }
    if !rates.is_empty() {
        s.push_str("\nprobe rates\n");
        for (am, r) in rates {
            s.push_str(&format!(
                "  {am}: E selected {}  fictionality detected {}\n",
                f3(r.e_selection_rate),
                f3(r.fictionality_detection_rate)
            ));
        }
    }
    s
}

fn summary_json(
    data: &RunData,
    matrices: &[MetricMatrix],
    ranks: &[analysis::LengthRankDistribution],
    rates: &BTreeMap<String, metrics::ProbeRates>,
) -> serde_json::Value {
    let ms: Vec<serde_json::Value> = matrices
        .iter()
        .map(|m| {
            json!({
                "mode": m.mode,
                "presentation": m.kind.as_str(),
                "qms": m.qms,
                "ams": m.ams,
                "overall": m.overall,
                "row_avg": m.row_avg,
                "col_avg": m.col_avg,
                "top4": m.top4,
                "qm_blocks": m.qm_blocks,
                "am_blocks": m.am_blocks,
                "missing": m.missing,
                "cells": m.cells.values().collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({
        "run_id": data.manifest.run_id,
        "counts": {
            "questions": data.questions.len(),
            "rejects": data.rejects.len(),
            "answers": data.answers.len(),
            "probes": data.probes.len(),
            "embeddings": data.embeddings.len(),
        },
        "matrices": ms,
        "length_ranks": ranks,
        "probe_rates": rates,
        "families": data.manifest.models.iter().map(|m| (m.id.clone(), m.family.clone())).collect::<BTreeMap<_, _>>(),
    })
}

/// Writes every report file and marks the run complete.
pub fn cmd_report(run_dir: &Path, opts: &ReportOptions) -> Result<Vec<PathBuf>, CliError> {
    let store = RunStore::open(run_dir)?;
    let data = load_run(run_dir)?;
    for w in &data.warnings {
        log::warn!("{w}");
    }
    let dir = store.reports_dir();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut written = Vec::new();
    for (name, bytes) in render_reports(&data, opts) {
        let path = dir.join(&name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        written.push(path);
    }
    store.finalize()?;
    Ok(written)
}

/// (κ, α) per (qm, am, mode, presentation).
pub type MatrixCells = HashMap<(String, String, String, String), (Option<f64>, f64)>;

/// Reads κ/α cells back from a matrix.csv.
pub fn read_matrix_csv(path: &Path) -> Result<MatrixCells, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Integrity(e.to_string()))?;
    let mut out = HashMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::Integrity(e.to_string()))?;
        let kappa = match &rec[3] {
            "" => None,
            k => Some(k.parse().map_err(|_| CliError::Integrity(format!("bad kappa {k}")))?),
        };
        let alpha = rec[4].parse().map_err(|_| CliError::Integrity(format!("bad alpha {}", &rec[4])))?;
        out.insert((rec[0].to_string(), rec[1].to_string(), rec[2].to_string(), rec[8].to_string()), (kappa, alpha));
    }
    Ok(out)
}

/// Letter the correct answer was presented under, for scripted fixtures.
pub fn presented_letter(a: &AnswerRecord, native: Label) -> Label {
    a.presentation.permutation.presented(native)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
[[models]]
id = "qm"
endpoint_kind = "chat"
base_url = "stub:"
model_name = "qm-1"
role_tags = ["question_model", "answer_model"]
family = "f"
"#;

    #[test]
    fn defaults_follow_the_experiment_design() {
        let c = Config::from_toml(MINIMAL, ".").unwrap();
        assert_eq!(c.counts.direct, 20);
        assert_eq!(c.counts.context, 20);
        assert_eq!(c.counts.sequential, 10);
        assert_eq!(c.topics.college.len(), 17);
        assert_eq!(c.topics.creative.len(), 10);
        assert_eq!(c.concurrency, 4);
        assert!(c.eq2_include_self);
        assert_eq!(c.modes, vec![Mode::Direct, Mode::Context]);
    }

    #[test]
    fn missing_roles_are_config_errors() {
        let no_am = MINIMAL.replace(r#"["question_model", "answer_model"]"#, r#"["question_model"]"#);
        let e = Config::from_toml(&no_am, ".").unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let no_qm = MINIMAL.replace(r#"["question_model", "answer_model"]"#, r#"["answer_model"]"#);
        assert!(matches!(Config::from_toml(&no_qm, "."), Err(CliError::Config(_))));
        let no_family = MINIMAL.replace(r#"family = "f""#, r#"family = """#);
        assert!(Config::from_toml(&no_family, ".").is_err());
        assert!(Config::from_toml("models = []", ".").is_err());
    }

    #[test]
    fn run_id_is_stable() {
        let c = Config::from_toml(MINIMAL, ".").unwrap();
        let a = run_id(&c.hash(), 7);
        assert_eq!(a, run_id(&c.hash(), 7));
        assert_ne!(a, run_id(&c.hash(), 8));
        assert!(a.starts_with("run-") && a.len() == 16);
    }

    #[test]
    fn scale_rounds_and_keeps_one() {
        let c = Config::from_toml(MINIMAL, ".").unwrap();
        let o = Overrides { scale: Some(0.25), ..Default::default() };
        assert_eq!(o.count(&c, Mode::Direct), 5);
        let o = Overrides { scale: Some(0.01), ..Default::default() };
        assert_eq!(o.count(&c, Mode::Sequential), 1);
    }

    #[test]
    fn probe_kind_names() {
        assert_eq!("letters".parse::<ProbeKind>(), Ok(ProbeKind::Letters));
        assert_eq!("choice-e".parse::<ProbeKind>(), Ok(ProbeKind::ChoiceE));
        assert!("bert".parse::<ProbeKind>().is_err());
    }
}
