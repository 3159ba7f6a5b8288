//! Scores the four choices of a question by perplexity and by next-token
//! letter probability against a scripted scorer.
//!
//! cargo run --example perplexity_probe

use std::sync::Arc;

use iqa::domain::{Label, Mode, ModelSpec, Question};
use iqa::probes::{score_by_letter_probability, score_by_perplexity};
use iqa::providers::{Client, StubBackend};

const STUB: &str = r#"
[[rule]]
kind = "score"
continuation = "Hydrogen"
logprobs = [["Hyd", -0.9], ["rogen", -0.1]]

[[rule]]
kind = "score"
match = ""
uniform_logprob = -1.5

[[rule]]
kind = "next_token"
match = ""
distribution = { " D" = 0.55, " A" = 0.2, "B" = 0.1, " C" = 0.05 }
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scorer: ModelSpec = toml::from_str(
        r#"
id = "base"
endpoint_kind = "completion_with_logprobs"
base_url = "stub:"
model_name = "base"
role_tags = ["scorer"]
family = "base"
chat_template = "llama3"
"#,
    )?;
    let client = Client::new(Arc::new(StubBackend::from_toml(STUB)?));
    let q = Question::new(
        "m1",
        Mode::Direct,
        "chemistry",
        0,
        "Which element is most likely to tunnel into a stable noble-gas compound?".into(),
        vec!["Nitrogen".into(), "Carbon".into(), "Oxygen".into(), "Hydrogen".into()],
        Label::D,
        None,
        None,
        String::new(),
    );
    let p = score_by_perplexity(&client, &scorer, &q, false)?;
    println!("perplexity {:?} -> lowest {}", p.scores, p.argbest);
    let l = score_by_letter_probability(&client, &scorer, &q)?;
    println!("letter probability {:?} via {:?} -> highest {}", l.scores, l.forms, l.argbest);
    Ok(())
}
