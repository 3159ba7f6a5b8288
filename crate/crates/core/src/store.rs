//! Run directory: a manifest plus append-only JSONL journals.
//!
//! ```text
//! <run>/manifest.json
//! <run>/questions.jsonl   rejects.jsonl   answers.jsonl
//! <run>/probes.jsonl      embeddings.jsonl
//! <run>/reports/
//! ```
//!
//! Appends go through one mutex per store, so each file has a single writer.
//! A torn final line (a crash mid-append) is skipped with a warning on load
//! and cut off before the next append.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::EmbeddingRecord;
use crate::domain::{
    validate_question, AnswerRecord, ArtifactFile, Outcome, PresentationKind, Question, RunManifest, RunStatus,
    SCHEMA_VERSION,
};
use crate::genpipeline::{GenerationTask, RejectRecord, SlotKey};
use crate::probes::ProbeRecord;

pub const MANIFEST: &str = "manifest.json";
pub const QUESTIONS: &str = "questions.jsonl";
pub const REJECTS: &str = "rejects.jsonl";
pub const ANSWERS: &str = "answers.jsonl";
pub const PROBES: &str = "probes.jsonl";
pub const EMBEDDINGS: &str = "embeddings.jsonl";
pub const REPORTS: &str = "reports";

const JOURNALS: [&str; 5] = [QUESTIONS, REJECTS, ANSWERS, PROBES, EMBEDDINGS];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Everything in a run directory, in file order.
#[derive(Debug, Clone)]
pub struct RunData {
    pub manifest: RunManifest,
    pub questions: Vec<Question>,
    pub rejects: Vec<RejectRecord>,
    pub answers: Vec<AnswerRecord>,
    pub probes: Vec<ProbeRecord>,
    pub embeddings: Vec<EmbeddingRecord>,
    pub warnings: Vec<String>,
}

impl RunData {
    pub fn question_map(&self) -> HashMap<String, Question> {
        self.questions.iter().map(|q| (q.question_id.clone(), q.clone())).collect()
    }

    /// Answer records grouped by (question id, am id).
    pub fn answers_by_pair(&self) -> HashMap<(String, String), Vec<&AnswerRecord>> {
        let mut m: HashMap<(String, String), Vec<&AnswerRecord>> = HashMap::new();
        for a in &self.answers {
            m.entry((a.question_id.clone(), a.am_id.clone())).or_default().push(a);
        }
        m
    }

    /// Embedding vectors from one embedder, keyed by question id.
    pub fn embeddings_from(&self, embedder_id: &str) -> HashMap<String, Vec<f64>> {
        self.embeddings
            .iter()
            .filter(|e| e.embedder_id == embedder_id)
            .map(|e| (e.question_id.clone(), e.vector.clone()))
            .collect()
    }
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

fn write_manifest(dir: &Path, m: &RunManifest) -> io::Result<()> {
    let mut s = serde_json::to_string_pretty(m).expect("manifest serializes");
    s.push('\n');
    write_atomic(&dir.join(MANIFEST), s.as_bytes())
}

fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST);
    let text =
        fs::read_to_string(&path).map_err(|e| StoreError::CorruptManifest(format!("{}: {e}", path.display())))?;
    let m: RunManifest =
        serde_json::from_str(&text).map_err(|e| StoreError::CorruptManifest(format!("{}: {e}", path.display())))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(StoreError::CorruptManifest(format!(
            "schema_version {} (expected {SCHEMA_VERSION})",
            m.schema_version
        )));
    }
    Ok(m)
}

/// Parsed records plus where the clean prefix of the file ends.
struct Journal<T> {
    records: Vec<T>,
    /// Byte length of the fully parsed prefix, when a torn tail follows it.
    torn_at: Option<u64>,
    /// Last record parsed but lacks its newline.
    missing_newline: bool,
}

fn read_journal<T: DeserializeOwned>(path: &Path, warnings: &mut Vec<String>) -> Result<Journal<T>> {
    let mut j = Journal { records: Vec::new(), torn_at: None, missing_newline: false };
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(j),
        Err(e) => return Err(e.into()),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut offset = 0usize;
    let mut lineno = 0usize;
    while offset < bytes.len() {
        lineno += 1;
        let (line, next, terminated) = match bytes[offset..].iter().position(|&b| b == b'\n') {
            Some(p) => (&bytes[offset..offset + p], offset + p + 1, true),
            None => (&bytes[offset..], bytes.len(), false),
        };
        if line.iter().all(u8::is_ascii_whitespace) {
            offset = next;
            continue;
        }
        match serde_json::from_slice::<T>(line) {
            Ok(r) => {
                j.records.push(r);
                j.missing_newline = !terminated;
            }
            Err(e) if !terminated => {
                warnings.push(format!("{name}: ignoring torn final line {lineno} ({e})"));
                log::warn!("{name}: ignoring torn final line {lineno}");
                j.torn_at = Some(offset as u64);
            }
            Err(e) => return Err(StoreError::SchemaViolation(format!("{name} line {lineno}: {e}"))),
        }
        offset = next;
    }
    Ok(j)
}

/// Reads a run directory. A complete run must match its recorded hashes.
pub fn load_run(dir: impl AsRef<Path>) -> Result<RunData> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    if manifest.status == RunStatus::Complete {
        verify_artifacts(dir, &manifest)?;
    }
    let mut warnings = Vec::new();
    Ok(RunData {
        questions: read_journal(&dir.join(QUESTIONS), &mut warnings)?.records,
        rejects: read_journal(&dir.join(REJECTS), &mut warnings)?.records,
        answers: read_journal(&dir.join(ANSWERS), &mut warnings)?.records,
        probes: read_journal(&dir.join(PROBES), &mut warnings)?.records,
        embeddings: read_journal(&dir.join(EMBEDDINGS), &mut warnings)?.records,
        manifest,
        warnings,
    })
}

pub fn verify_artifacts(dir: &Path, manifest: &RunManifest) -> Result<()> {
    for a in &manifest.artifact_files {
        let path = dir.join(&a.path);
        let got = sha256_file(&path).map_err(|e| StoreError::Integrity(format!("{}: {e}", a.path)))?;
        if got != a.sha256 {
            return Err(StoreError::Integrity(format!("{} hash {got} != recorded {}", a.path, a.sha256)));
        }
    }
    Ok(())
}

type AnswerKey = (String, String, PresentationKind);
type RejectKey = (String, crate::domain::Mode, String, u32, u32);

struct Inner {
    data: RunData,
    question_ids: HashMap<String, usize>,
    reject_keys: HashSet<RejectKey>,
    answer_keys: HashSet<AnswerKey>,
    probe_keys: HashSet<(String, String, String)>,
    embedding_keys: HashSet<(String, String)>,
}

/// Writable handle on a run directory.
pub struct RunStore {
    dir: PathBuf,
    inner: Mutex<Inner>,
}

fn reject_key(r: &RejectRecord) -> RejectKey {
    (r.qm_id.clone(), r.mode, r.topic.clone(), r.ordinal, r.attempt)
}

impl RunStore {
    /// Creates a new run directory. Fails if a manifest already exists.
    pub fn create(dir: impl AsRef<Path>, mut manifest: RunManifest) -> Result<RunStore> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        if dir.join(MANIFEST).exists() {
            return Err(StoreError::DuplicateKey(format!("run already exists at {}", dir.display())));
        }
        manifest.schema_version = SCHEMA_VERSION;
        manifest.status = RunStatus::InProgress;
        manifest.artifact_files.clear();
        write_manifest(dir, &manifest)?;
        RunStore::open(dir)
    }

    /// Opens an existing run, repairing a torn final line in any journal.
    pub fn open(dir: impl AsRef<Path>) -> Result<RunStore> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = read_manifest(&dir)?;
        if manifest.status == RunStatus::Complete {
            verify_artifacts(&dir, &manifest)?;
        }
        let mut warnings = Vec::new();
        let questions = Self::repaired::<Question>(&dir, QUESTIONS, &mut warnings)?;
        let rejects = Self::repaired::<RejectRecord>(&dir, REJECTS, &mut warnings)?;
        let answers = Self::repaired::<AnswerRecord>(&dir, ANSWERS, &mut warnings)?;
        let probes = Self::repaired::<ProbeRecord>(&dir, PROBES, &mut warnings)?;
        let embeddings = Self::repaired::<EmbeddingRecord>(&dir, EMBEDDINGS, &mut warnings)?;
        let inner = Inner {
            question_ids: questions.iter().enumerate().map(|(i, q)| (q.question_id.clone(), i)).collect(),
            reject_keys: rejects.iter().map(reject_key).collect(),
            answer_keys: answers.iter().map(|a| (a.question_id.clone(), a.am_id.clone(), a.kind())).collect(),
            probe_keys: probes.iter().map(ProbeRecord::key).collect(),
            embedding_keys: embeddings.iter().map(|e| (e.question_id.clone(), e.embedder_id.clone())).collect(),
            data: RunData { manifest, questions, rejects, answers, probes, embeddings, warnings },
        };
        Ok(RunStore { dir, inner: Mutex::new(inner) })
    }

    fn repaired<T: DeserializeOwned>(dir: &Path, name: &str, warnings: &mut Vec<String>) -> Result<Vec<T>> {
        let path = dir.join(name);
        let j = read_journal::<T>(&path, warnings)?;
        if let Some(len) = j.torn_at {
            OpenOptions::new().write(true).open(&path)?.set_len(len)?;
        } else if j.missing_newline {
            OpenOptions::new().append(true).open(&path)?.write_all(b"\n")?;
        }
        Ok(j.records)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.dir.join(REPORTS)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().expect("store lock")
    }

    pub fn manifest(&self) -> RunManifest {
        self.lock().data.manifest.clone()
    }

    pub fn warnings(&self) -> Vec<String> {
        self.lock().data.warnings.clone()
    }

    /// Snapshot of everything stored so far.
    pub fn data(&self) -> RunData {
        self.lock().data.clone()
    }

    pub fn question(&self, id: &str) -> Option<Question> {
        let inner = self.lock();
        inner.question_ids.get(id).map(|&i| inner.data.questions[i].clone())
    }

    pub fn questions(&self) -> Vec<Question> {
        self.lock().data.questions.clone()
    }

    pub fn answers(&self) -> Vec<AnswerRecord> {
        self.lock().data.answers.clone()
    }

    pub fn probes(&self) -> Vec<ProbeRecord> {
        self.lock().data.probes.clone()
    }

    pub fn rejects(&self) -> Vec<RejectRecord> {
        self.lock().data.rejects.clone()
    }

    /// Question ids already answered by `am_id` under `kind`.
    pub fn answered_ids(&self, am_id: &str, kind: PresentationKind) -> HashSet<String> {
        self.lock()
            .answer_keys
            .iter()
            .filter(|(_, am, k)| am == am_id && *k == kind)
            .map(|(q, _, _)| q.clone())
            .collect()
    }

    pub fn has_probe(&self, key: &(String, String, String)) -> bool {
        self.lock().probe_keys.contains(key)
    }

    pub fn has_embedding(&self, question_id: &str, embedder_id: &str) -> bool {
        self.lock().embedding_keys.contains(&(question_id.to_string(), embedder_id.to_string()))
    }

    /// Slots that hold a question or gave up after their last attempt.
    pub fn completed_slots(&self) -> HashSet<SlotKey> {
        let inner = self.lock();
        let slot = |qm: &str, mode, topic: &str, ordinal| SlotKey {
            qm_id: qm.to_string(),
            mode,
            topic: topic.to_string(),
            ordinal,
        };
        inner
            .data
            .questions
            .iter()
            .map(|q| slot(&q.qm_id, q.mode, &q.topic, q.ordinal))
            .chain(
                inner.data.rejects.iter().filter(|r| r.exhausted).map(|r| slot(&r.qm_id, r.mode, &r.topic, r.ordinal)),
            )
            .collect()
    }

    /// Slots of `tasks` that ended exhausted without a question.
    pub fn exhausted_slot_count(&self, tasks: &[GenerationTask]) -> usize {
        let inner = self.lock();
        let filled: HashSet<SlotKey> = inner
            .data
            .questions
            .iter()
            .map(|q| SlotKey { qm_id: q.qm_id.clone(), mode: q.mode, topic: q.topic.clone(), ordinal: q.ordinal })
            .collect();
        let exhausted: HashSet<SlotKey> = inner
            .data
            .rejects
            .iter()
            .filter(|r| r.exhausted)
            .map(|r| SlotKey { qm_id: r.qm_id.clone(), mode: r.mode, topic: r.topic.clone(), ordinal: r.ordinal })
            .filter(|k| !filled.contains(k))
            .collect();
        exhausted
            .iter()
            .filter(|k| {
                tasks
                    .iter()
                    .any(|t| t.qm.id == k.qm_id && t.mode == k.mode && t.topic == k.topic && k.ordinal < t.count)
            })
            .count()
    }

    fn write_line<T: Serialize>(&self, inner: &mut Inner, file: &str, record: &T) -> Result<()> {
        if inner.data.manifest.status == RunStatus::Complete {
            inner.data.manifest.status = RunStatus::InProgress;
            inner.data.manifest.artifact_files.clear();
            write_manifest(&self.dir, &inner.data.manifest)?;
        }
        let mut line = serde_json::to_string(record).map_err(|e| StoreError::SchemaViolation(e.to_string()))?;
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(self.dir.join(file))?;
        f.write_all(line.as_bytes())?;
        Ok(())
    }

    pub fn append_question(&self, q: &Question) -> Result<()> {
        if let Err(v) = validate_question(q) {
            let msg = v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
            return Err(StoreError::SchemaViolation(format!("question {}: {msg}", q.question_id)));
        }
        let mut inner = self.lock();
        if inner.question_ids.contains_key(&q.question_id) {
            return Err(StoreError::DuplicateKey(format!("question {}", q.question_id)));
        }
        self.write_line(&mut inner, QUESTIONS, q)?;
        let idx = inner.data.questions.len();
        inner.question_ids.insert(q.question_id.clone(), idx);
        inner.data.questions.push(q.clone());
        Ok(())
    }

    pub fn append_reject(&self, r: &RejectRecord) -> Result<()> {
        let mut inner = self.lock();
        let key = reject_key(r);
        if !inner.reject_keys.insert(key) {
            return Err(StoreError::DuplicateKey(format!(
                "reject {}/{}/{}/{}#{}",
                r.qm_id, r.mode, r.topic, r.ordinal, r.attempt
            )));
        }
        self.write_line(&mut inner, REJECTS, r)?;
        inner.data.rejects.push(r.clone());
        Ok(())
    }

    pub fn append_answer(&self, a: &AnswerRecord) -> Result<()> {
        if a.outcome == Outcome::SelectedE && !a.presentation.augmented_e {
            return Err(StoreError::SchemaViolation(format!(
                "answer {}/{}: E selected without an E choice",
                a.question_id, a.am_id
            )));
        }
        if a.presentation.question_id != a.question_id {
            return Err(StoreError::SchemaViolation(format!("answer {}: presentation id differs", a.question_id)));
        }
        let mut inner = self.lock();
        if !inner.question_ids.contains_key(&a.question_id) {
            return Err(StoreError::SchemaViolation(format!("answer for unknown question {}", a.question_id)));
        }
        let key = (a.question_id.clone(), a.am_id.clone(), a.kind());
        if inner.answer_keys.contains(&key) {
            return Err(StoreError::DuplicateKey(format!("answer {}/{}/{}", key.0, key.1, key.2.as_str())));
        }
        self.write_line(&mut inner, ANSWERS, a)?;
        inner.answer_keys.insert(key);
        inner.data.answers.push(a.clone());
        Ok(())
    }

    pub fn append_probe(&self, p: &ProbeRecord) -> Result<()> {
        if let ProbeRecord::ChoiceScore(c) = p {
            if c.scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
                return Err(StoreError::SchemaViolation(format!("choice score for {}", c.question_id)));
            }
        }
        let mut inner = self.lock();
        let key = p.key();
        if inner.probe_keys.contains(&key) {
            return Err(StoreError::DuplicateKey(format!("probe {}/{}/{}", key.0, key.1, key.2)));
        }
        self.write_line(&mut inner, PROBES, p)?;
        inner.probe_keys.insert(key);
        inner.data.probes.push(p.clone());
        Ok(())
    }

    pub fn append_embedding(&self, e: &EmbeddingRecord) -> Result<()> {
        if e.vector.is_empty() || e.vector.iter().any(|x| !x.is_finite()) {
            return Err(StoreError::SchemaViolation(format!("embedding for {}", e.question_id)));
        }
        let mut inner = self.lock();
        let key = (e.question_id.clone(), e.embedder_id.clone());
        if inner.embedding_keys.contains(&key) {
            return Err(StoreError::DuplicateKey(format!("embedding {}/{}", key.0, key.1)));
        }
        self.write_line(&mut inner, EMBEDDINGS, e)?;
        inner.embedding_keys.insert(key);
        inner.data.embeddings.push(e.clone());
        Ok(())
    }

    /// Records hashes of every journal and report file and marks the run
    /// complete.
    pub fn finalize(&self) -> Result<RunManifest> {
        let mut inner = self.lock();
        let mut paths: Vec<String> =
            JOURNALS.iter().filter(|f| self.dir.join(f).exists()).map(|f| f.to_string()).collect();
        let reports = self.dir.join(REPORTS);
        if reports.is_dir() {
            let mut names: Vec<String> = fs::read_dir(&reports)?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_file())
                .map(|e| format!("{REPORTS}/{}", e.file_name().to_string_lossy()))
                .collect();
            names.sort();
            paths.extend(names);
        }
        let artifact_files = paths
            .into_iter()
            .map(|p| Ok(ArtifactFile { sha256: sha256_file(&self.dir.join(&p))?, path: p }))
            .collect::<io::Result<Vec<_>>>()?;
        inner.data.manifest.artifact_files = artifact_files;
        inner.data.manifest.status = RunStatus::Complete;
        write_manifest(&self.dir, &inner.data.manifest)?;
        Ok(inner.data.manifest.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Label, Mode, Permutation, Presentation};

    pub(crate) fn manifest() -> RunManifest {
        RunManifest {
            schema_version: SCHEMA_VERSION,
            run_id: "run-test".into(),
            created_at: "2024-01-01T00:00:00Z".into(),
            config_hash: "c".into(),
            rng_seed: 0,
            topics: vec!["t".into()],
            models: vec![],
            artifact_files: vec![],
            status: RunStatus::InProgress,
        }
    }

    fn question(i: u32) -> Question {
        Question::new(
            "qm",
            Mode::Direct,
            "t",
            i,
            format!("Statement {i}?"),
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            Label::A,
            None,
            None,
            format!("raw {i}"),
        )
    }

    fn answer(q: &Question) -> AnswerRecord {
        AnswerRecord {
            question_id: q.question_id.clone(),
            am_id: "am".into(),
            presentation: Presentation {
                question_id: q.question_id.clone(),
                permutation: Permutation::IDENTITY,
                shuffled: false,
                augmented_e: false,
                presented_text: "body".into(),
            },
            raw_response: "Answer: A".into(),
            outcome: Outcome::Selected(Label::A),
            latency_ms: 3,
        }
    }

    #[test]
    fn question_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::create(dir.path(), manifest()).unwrap();
        let q = question(0);
        store.append_question(&q).unwrap();
        let text = fs::read_to_string(dir.path().join(QUESTIONS)).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(load_run(dir.path()).unwrap().questions, vec![q]);
    }

    #[test]
    fn duplicate_answer_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::create(dir.path(), manifest()).unwrap();
        let q = question(0);
        store.append_question(&q).unwrap();
        store.append_answer(&answer(&q)).unwrap();
        assert!(matches!(store.append_answer(&answer(&q)), Err(StoreError::DuplicateKey(_))));
        let mut native_e = answer(&q);
        native_e.presentation.augmented_e = true;
        store.append_answer(&native_e).unwrap();
    }

    #[test]
    fn invalid_question_is_schema_violation() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::create(dir.path(), manifest()).unwrap();
        let mut q = question(0);
        q.choices.pop();
        assert!(matches!(store.append_question(&q), Err(StoreError::SchemaViolation(_))));
    }

    #[test]
    fn missing_manifest_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_run(dir.path()), Err(StoreError::CorruptManifest(_))));
        fs::write(dir.path().join(MANIFEST), "{").unwrap();
        assert!(matches!(load_run(dir.path()), Err(StoreError::CorruptManifest(_))));
    }

    #[test]
    fn torn_tail_is_skipped_then_repaired() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::create(dir.path(), manifest()).unwrap();
        let qs: Vec<Question> = (0..3).map(question).collect();
        for q in &qs[..2] {
            store.append_question(q).unwrap();
        }
        drop(store);
        let path = dir.path().join(QUESTIONS);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"question_id":"q12","mo"#).unwrap();
        drop(f);

        let data = load_run(dir.path()).unwrap();
        assert_eq!(data.questions.len(), 2);
        assert_eq!(data.warnings.len(), 1);

        let store = RunStore::open(dir.path()).unwrap();
        store.append_question(&qs[2]).unwrap();
        let data = load_run(dir.path()).unwrap();
        assert_eq!(data.questions, qs);
        assert!(data.warnings.is_empty());
    }

    #[test]
    fn corrupt_interior_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        RunStore::create(dir.path(), manifest()).unwrap();
        fs::write(dir.path().join(QUESTIONS), "not json\n{}\n").unwrap();
        assert!(matches!(load_run(dir.path()), Err(StoreError::SchemaViolation(_))));
    }

    #[test]
    fn finalize_then_tamper_fails_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::create(dir.path(), manifest()).unwrap();
        store.append_question(&question(0)).unwrap();
        let m = store.finalize().unwrap();
        assert_eq!(m.status, RunStatus::Complete);
        assert_eq!(m.artifact_files[0].path, QUESTIONS);
        load_run(dir.path()).unwrap();
        let mut f = OpenOptions::new().append(true).open(dir.path().join(QUESTIONS)).unwrap();
        f.write_all(b"\n").unwrap();
        assert!(matches!(load_run(dir.path()), Err(StoreError::Integrity(_))));
    }

    #[test]
    fn append_after_finalize_reopens_run() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::create(dir.path(), manifest()).unwrap();
        store.append_question(&question(0)).unwrap();
        store.finalize().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        store.append_question(&question(1)).unwrap();
        let data = load_run(dir.path()).unwrap();
        assert_eq!(data.manifest.status, RunStatus::InProgress);
        assert_eq!(data.questions.len(), 2);
    }
}
