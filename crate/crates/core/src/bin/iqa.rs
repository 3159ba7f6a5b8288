use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use iqa::cli::{self, AnswerFlags, CliError, Config, Overrides, ProbeKind, ReportOptions};
use iqa::domain::Mode;

#[derive(Parser)]
#[command(name = "iqa", version, about = "Imaginary question answering harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory holding the manifest and journals.
    #[arg(long)]
    run_dir: PathBuf,
    /// Comma-separated modes: direct, context, sequential, creative_direct, creative_context.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<Mode>>,
    #[arg(long)]
    concurrency: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides { modes: self.modes.clone(), concurrency: self.concurrency, ..Default::default() }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate questions for every (question model, mode, topic) slot.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Multiply the configured per-slot counts.
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Reject generations whose answer line is not exactly `Answer: X`.
        #[arg(long)]
        strict_parse: bool,
    },
    /// Answer stored questions with every answer model.
    Answer {
        #[command(flatten)]
        common: Common,
        /// Also answer with the choices in generation order.
        #[arg(long)]
        native: bool,
        /// Append the fixed "none of the above" choice E.
        #[arg(long)]
        augment_e: bool,
    },
    /// Run an auxiliary probe: perplexity, letters, fictionality, choice-e or embed.
    Probe {
        #[command(flatten)]
        common: Common,
        kind: ProbeKind,
    },
    /// Write report tables and mark the run complete.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Generate { common, scale, seed, strict_parse } => {
            let config = Config::load(&common.config)?;
            let o = Overrides { scale, seed, strict_parse, ..common.overrides() };
            let s = cli::cmd_generate(&config, &common.run_dir, &o)?;
            println!(
                "{} questions generated, {} slots skipped, {} rejects",
                s.generated_questions, s.skipped, s.rejects
            );
        }
        Command::Answer { common, native, augment_e } => {
            let config = Config::load(&common.config)?;
            let n = cli::cmd_answer(&config, &common.run_dir, AnswerFlags { native, augment_e }, &common.overrides())?;
            println!("{n} answers recorded");
        }
        Command::Probe { common, kind } => {
            let config = Config::load(&common.config)?;
            let n = cli::cmd_probe(&config, &common.run_dir, kind, &common.overrides())?;
            println!("{n} probe records");
        }
        Command::Report { config, run_dir } => {
            let opts = match config {
                Some(p) => ReportOptions::from_config(&Config::load(p)?)?,
                None => ReportOptions { eq2_include_self: true, stopwords: None },
            };
            for p in cli::cmd_report(&run_dir, &opts)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("iqa: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
