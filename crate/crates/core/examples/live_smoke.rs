//! Small live run against real providers: five topics, five direct and five
//! context questions per model. Credentials come from the variables named by
//! each model's `api_key_env`.
//!
//! IQA_LIVE_CONFIG=live.toml cargo run --example live_smoke

use iqa::cli::{self, AnswerFlags, Config, Overrides, ReportOptions};
use iqa::domain::Mode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let Ok(path) = std::env::var("IQA_LIVE_CONFIG") else {
        eprintln!("set IQA_LIVE_CONFIG to a config with at least two real models");
        return Ok(());
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut config = Config::load(&path)?;
    config.topics.college.truncate(5);
    config.counts.direct = 5;
    config.counts.context = 5;
    let run = std::env::var("IQA_LIVE_RUN_DIR").unwrap_or_else(|_| "live-run".into());
    let o = Overrides { modes: Some(vec![Mode::Direct, Mode::Context]), ..Default::default() };
    cli::cmd_generate(&config, run.as_ref(), &o)?;
    cli::cmd_answer(&config, run.as_ref(), AnswerFlags::default(), &o)?;
    cli::cmd_report(run.as_ref(), &ReportOptions::from_config(&config)?)?;
    print!("{}", std::fs::read_to_string(format!("{run}/reports/summary.txt"))?);
    Ok(())
}
