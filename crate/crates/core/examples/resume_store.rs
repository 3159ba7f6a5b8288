//! A run directory survives a write cut short: the torn last line is dropped
//! on reopen and appends continue from there.
//!
//! cargo run --example resume_store

use std::io::Write;

use iqa::domain::{Label, Mode, Question, RunManifest, RunStatus, SCHEMA_VERSION};
use iqa::store::{RunStore, QUESTIONS};

fn question(i: u32) -> Question {
    Question::new(
        "qm",
        Mode::Direct,
        "law",
        i,
        format!("Question {i}?"),
        vec!["a".into(), "b".into(), "c".into(), "d".into()],
        Label::B,
        None,
        None,
        format!("raw {i}"),
    )
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        run_id: "run-demo".into(),
        created_at: "2024-01-01T00:00:00Z".into(),
        config_hash: "none".into(),
        rng_seed: 0,
        topics: vec!["law".into()],
        models: vec![],
        artifact_files: vec![],
        status: RunStatus::InProgress,
    };
    let store = RunStore::create(tmp.path(), manifest)?;
    store.append_question(&question(0))?;
    store.append_question(&question(1))?;
    drop(store);

    let mut f = std::fs::OpenOptions::new().append(true).open(tmp.path().join(QUESTIONS))?;
    f.write_all(b"{\"question_id\":\"half-writ")?;
    drop(f);

    let store = RunStore::open(tmp.path())?;
    println!("warnings on reopen: {:?}", store.warnings());
    store.append_question(&question(2))?;
    println!("questions now: {}", store.questions().len());
    Ok(())
}
