//! Runs generate, answer and report on the scripted two-model scenario and
//! prints the summary. Fully offline.
//!
//! cargo run --example stub_pipeline

use std::path::Path;

use iqa::cli::{self, AnswerFlags, Config, Overrides, ReportOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/scenario");
    let config = Config::load(fixtures.join("config.toml"))?;
    let tmp = tempfile::tempdir()?;
    let run = tmp.path().join("run");

    let o = Overrides::default();
    let g = cli::cmd_generate(&config, &run, &o)?;
    println!("generated {} questions", g.generated_questions);
    let n = cli::cmd_answer(&config, &run, AnswerFlags { native: true, augment_e: false }, &o)?;
    println!("recorded {n} answers");
    cli::cmd_report(&run, &ReportOptions::from_config(&config)?)?;
    print!("{}", std::fs::read_to_string(run.join("reports/summary.txt"))?);
    Ok(())
}
