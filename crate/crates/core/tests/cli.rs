//! The `iqa` binary end to end on stub fixtures: every command, the report
//! files and the exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use iqa::store;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn iqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iqa")).args(args).env("RUST_LOG", "warn").output().expect("run iqa")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(out: Output) -> String {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn probes_config() -> String {
    fixtures().join("probes/config.toml").display().to_string()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn full_run_with_every_probe() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let run = run.to_str().unwrap();
    let cfg = probes_config();
    let common = ["--config", &cfg, "--run-dir", run];

    let out = ok(iqa(&[&["generate"][..], &common].concat()));
    assert!(out.contains("3 questions generated"), "{out}");
    ok(iqa(&[&["answer", "--native"][..], &common].concat()));
    for kind in ["perplexity", "letters", "fictionality", "choice-e", "embed"] {
        ok(iqa(&[&["probe", kind][..], &common].concat()));
    }
    let listed = ok(iqa(&["report", "--config", &cfg, "--run-dir", run]));
    for name in iqa::cli::REPORT_FILES {
        assert!(listed.contains(name), "{name} not written");
    }
    let reports = Path::new(run).join(store::REPORTS);

    // Orrin scattering is answered correctly, the other direct question and
    // the context question are refused.
    let matrix = csv_rows(&reports.join("matrix.csv"));
    let cell = |mode: &str, pres: &str| -> (String, String) {
        let r = matrix.iter().find(|r| r[2] == mode && r[8] == pres).expect("cell");
        (r[3].clone(), r[4].clone())
    };
    assert_eq!(cell("direct", "shuffled"), ("1".into(), "0.5".into()));
    assert_eq!(cell("direct", "native"), ("1".into(), "0.5".into()));
    assert_eq!(cell("context", "shuffled"), ("".into(), "0".into()));
    assert!(matrix.iter().any(|r| r[8] == "shuffled_e"));

    let rates = csv_rows(&reports.join("probe_rates.csv"));
    assert_eq!(rates.len(), 1);
    assert_eq!(rates[0][0], "chat");
    assert_eq!(rates[0][3], "1", "every E-augmented answer picked E");
    assert_eq!(rates[0][7], "1", "the context paragraph was called not real");

    let scores = csv_rows(&reports.join("choice_scores.csv"));
    assert_eq!(scores.len(), 6);
    // Uniform logprobs tie every choice, so the first label wins.
    assert!(scores.iter().filter(|r| r[4] == "perplexity").all(|r| r[9] == "A"));
    // " A" is the most likely letter token.
    assert!(scores.iter().filter(|r| r[4] == "letter_probability").all(|r| r[9] == "A"));

    let tsv = fs::read_to_string(reports.join("embeddings.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 4);
    let sim = csv_rows(&reports.join("similarity.csv"));
    assert!(sim.iter().any(|r| r[0] == "chat" && r[1] == "chat" && r[2] == "direct"));
    assert!(!csv_rows(&reports.join("native_delta.csv")).is_empty());
    assert!(!csv_rows(&reports.join("word_freq.csv")).is_empty());
    assert_eq!(csv_rows(&reports.join("length_ranks.csv")).len(), 2);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(reports.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["counts"]["questions"], 3);

    // Finished runs verify their hashes; a tampered journal is caught.
    let manifest = fs::read_to_string(Path::new(run).join(store::MANIFEST)).unwrap();
    assert!(manifest.contains("\"complete\""));
    let answers = Path::new(run).join(store::ANSWERS);
    let text = fs::read_to_string(&answers).unwrap().replacen("Answer: E", "Answer: A", 1);
    fs::write(&answers, text).unwrap();
    let out = iqa(&["report", "--run-dir", run]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_resumes_and_refuses_a_changed_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let run = run.to_str().unwrap();
    let cfg = probes_config();
    ok(iqa(&["generate", "--config", &cfg, "--run-dir", run]));
    let again = ok(iqa(&["generate", "--config", &cfg, "--run-dir", run]));
    assert!(again.contains("0 questions generated, 3 slots skipped"), "{again}");
    let out = iqa(&["generate", "--config", &cfg, "--run-dir", run, "--seed", "6"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn configuration_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let run = run.to_str().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(
        &bad,
        "[[models]]\nid = \"x\"\nendpoint_kind = \"chat\"\nbase_url = \"stub:\"\nmodel_name = \"x\"\nrole_tags = [\"answer_model\"]\nfamily = \"f\"\n",
    )
    .unwrap();
    let out = iqa(&["generate", "--config", bad.to_str().unwrap(), "--run-dir", run]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no question model"));

    let out = iqa(&["answer", "--config", &probes_config(), "--run-dir", run]);
    assert_eq!(code(&out), 1, "answering before generating");
    let out = iqa(&["generate", "--config", tmp.path().join("absent.toml").to_str().unwrap(), "--run-dir", run]);
    assert_eq!(code(&out), 1);
}

/// A copy of the probe fixture config with edits applied.
fn variant(dir: &Path, edit: impl Fn(String) -> String) -> String {
    let text = fs::read_to_string(fixtures().join("probes/config.toml")).unwrap();
    let stub = fixtures().join("probes/stub.toml");
    let text =
        text.replace("stub_fixture = \"stub.toml\"", &format!("stub_fixture = {:?}", stub.display().to_string()));
    let path = dir.join("config.toml");
    fs::write(&path, edit(text)).unwrap();
    path.display().to_string()
}

#[test]
fn provider_failures_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let run = run.to_str().unwrap();

    // No scripted reply for history prompts.
    let cfg = variant(tmp.path(), |t| t.replace("college = [\"physics\"]", "college = [\"history\"]"));
    let out = iqa(&["generate", "--config", &cfg, "--run-dir", run]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));

    // A chat endpoint cannot score continuations.
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let run = run.to_str().unwrap();
    let cfg =
        variant(tmp.path(), |t| t.replace("endpoint_kind = \"completion_with_logprobs\"", "endpoint_kind = \"chat\""));
    ok(iqa(&["generate", "--config", &cfg, "--run-dir", run]));
    let out = iqa(&["probe", "perplexity", "--config", &cfg, "--run-dir", run]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("continuation logprobs"));
}

#[test]
fn scale_shrinks_counts_and_modes_select_slots() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let run = run.to_str().unwrap();
    let cfg = probes_config();
    let out = ok(iqa(&["generate", "--config", &cfg, "--run-dir", run, "--modes", "direct", "--scale", "0.5"]));
    assert!(out.contains("1 questions generated"), "{out}");
}
