//! Auxiliary measurements: perplexity and next-token letter scoring of the
//! four choices, choice-E answer runs and direct fictionality queries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anspipeline::{answer_all, AnswerError, AnswerSummary, AnswerTask};
use crate::domain::{Label, ModelSpec, Question};
use crate::prompts;
use crate::providers::{ChatMessage, ChatRequest, Client, ProviderError, TokenForm};
use crate::store::RunStore;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("choice {label} of {question_id} produced no scored tokens")]
    TokenizationEmpty { question_id: String, label: Label },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    Perplexity,
    LetterProbability,
}

impl ScoreMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMethod::Perplexity => "perplexity",
            ScoreMethod::LetterProbability => "letter_probability",
        }
    }
}

/// Per-choice scores in native label order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceScore {
    pub question_id: String,
    pub scorer_id: String,
    pub method: ScoreMethod,
    pub scores: [f64; 4],
    /// Winning token form per letter, letter scoring only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forms: Option<[TokenForm; 4]>,
    pub argbest: Label,
}

/// Index of the best score; the first label wins ties.
pub fn argbest(scores: &[f64; 4], lower_is_better: bool) -> Label {
    let mut best = 0;
    for i in 1..4 {
        let better = if lower_is_better { scores[i] < scores[best] } else { scores[i] > scores[best] };
        if better {
            best = i;
        }
    }
    Label::ALL[best]
}

/// exp of the negated mean log-probability.
pub fn perplexity(logprobs: &[f64]) -> f64 {
    (-logprobs.iter().sum::<f64>() / logprobs.len() as f64).exp()
}

/// Context for perplexity scoring: the question statement (and optionally
/// its choices) in the scorer's chat template, up to the answer prefix.
pub fn perplexity_context(scorer: &ModelSpec, q: &Question, include_choices: bool) -> String {
    let body = if include_choices {
        let choices: Vec<&str> = q.choices.iter().map(String::as_str).collect();
        prompts::question_body(&q.statement, &choices, false)
    } else {
        q.statement.clone()
    };
    scorer.chat_template.render(&prompts::perplexity_user(&body), prompts::PERPLEXITY_ASSISTANT_PREFIX)
}

pub fn score_by_perplexity(
    client: &Client,
    scorer: &ModelSpec,
    q: &Question,
    include_choices: bool,
) -> Result<ChoiceScore, ProbeError> {
    let context = perplexity_context(scorer, q, include_choices);
    let mut scores = [0.0; 4];
    for l in Label::ALL {
        let scored = client.score_completion(scorer, &context, q.choice(l))?;
        if scored.token_logprobs.is_empty() {
            return Err(ProbeError::TokenizationEmpty { question_id: q.question_id.clone(), label: l });
        }
        let lps: Vec<f64> = scored.token_logprobs.iter().map(|t| t.logprob).collect();
        scores[l.index()] = perplexity(&lps);
    }
    Ok(ChoiceScore {
        question_id: q.question_id.clone(),
        scorer_id: scorer.id.clone(),
        method: ScoreMethod::Perplexity,
        argbest: argbest(&scores, true),
        scores,
        forms: None,
    })
}

pub fn score_by_letter_probability(
    client: &Client,
    scorer: &ModelSpec,
    q: &Question,
) -> Result<ChoiceScore, ProbeError> {
    let dist = client.next_token_distribution(scorer, &prompts::letter_context(q), &["A", "B", "C", "D"])?;
    let mut scores = [0.0; 4];
    let mut forms = [TokenForm::Bare; 4];
    for l in Label::ALL {
        let c = &dist.entries[&l.to_string()];
        scores[l.index()] = c.probability;
        forms[l.index()] = c.form;
    }
    Ok(ChoiceScore {
        question_id: q.question_id.clone(),
        scorer_id: scorer.id.clone(),
        method: ScoreMethod::LetterProbability,
        argbest: argbest(&scores, false),
        scores,
        forms: Some(forms),
    })
}

/// Answers `question_ids` with the fixed E choice appended after the
/// shuffled A-D choices.
pub fn run_choice_e(
    store: &RunStore,
    client: &Client,
    am: &ModelSpec,
    question_ids: Vec<String>,
    seed: u64,
    concurrency: usize,
) -> Result<AnswerSummary, AnswerError> {
    let task = AnswerTask { am: am.clone(), question_ids, shuffle: true, augment_e: true, rng_seed: seed };
    answer_all(store, client, &task, concurrency)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FictionalityVerdict {
    /// The model calls the concept real.
    Yes,
    /// The model calls the concept not real: a detection.
    No,
    Unparseable,
}

impl FictionalityVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            FictionalityVerdict::Yes => "yes",
            FictionalityVerdict::No => "no",
            FictionalityVerdict::Unparseable => "unparseable",
        }
    }
}

/// Classifies a reply by its leading word.
pub fn parse_fictionality(reply: &str) -> FictionalityVerdict {
    let t = reply.trim().trim_start_matches(['*', '"', '\'']).trim_start();
    let word: String = t.chars().take_while(|c| c.is_alphabetic()).collect();
    let rest = &t[word.len()..];
    let bounded = rest.is_empty() || !rest.starts_with(|c: char| c.is_alphanumeric());
    match word.to_lowercase().as_str() {
        "yes" if bounded => FictionalityVerdict::Yes,
        "no" if bounded => FictionalityVerdict::No,
        _ if t.to_lowercase().starts_with("it does not") => FictionalityVerdict::No,
        _ => FictionalityVerdict::Unparseable,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FictionalityRecord {
    pub question_id: String,
    pub am_id: String,
    pub topic: String,
    pub reply: String,
    pub verdict: FictionalityVerdict,
}

/// Asks `am` whether the context paragraph of `q` describes a real concept.
/// `None` when the question has no context.
pub fn query_fictionality(
    client: &Client,
    am: &ModelSpec,
    q: &Question,
) -> Result<Option<FictionalityRecord>, ProviderError> {
    let Some(ctx) = &q.context else { return Ok(None) };
    let req = ChatRequest {
        model_name: am.model_name.clone(),
        messages: vec![ChatMessage::user(prompts::fictionality_query(&q.topic, &ctx.paragraph))],
        temperature: am.answer_temperature(),
        max_tokens: am.max_tokens,
    };
    let reply = client.chat(am, &req, None)?;
    Ok(Some(FictionalityRecord {
        question_id: q.question_id.clone(),
        am_id: am.id.clone(),
        topic: q.topic.clone(),
        verdict: parse_fictionality(&reply),
        reply,
    }))
}

/// One line of probes.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "probe", rename_all = "snake_case")]
pub enum ProbeRecord {
    ChoiceScore(ChoiceScore),
    Fictionality(FictionalityRecord),
}

impl ProbeRecord {
    /// (probe kind, question id, model id)
    pub fn key(&self) -> (String, String, String) {
        match self {
            ProbeRecord::ChoiceScore(c) => (c.method.as_str().to_string(), c.question_id.clone(), c.scorer_id.clone()),
            ProbeRecord::Fictionality(f) => ("fictionality".into(), f.question_id.clone(), f.am_id.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argbest_ties_go_to_first_label() {
        assert_eq!(argbest(&[0.25; 4], false), Label::A);
        assert_eq!(argbest(&[0.1, 0.6, 0.2, 0.1], false), Label::B);
        assert_eq!(argbest(&[2.0, 1.0, 1.0, 3.0], true), Label::B);
    }

    #[test]
    fn perplexity_of_certain_tokens_is_one() {
        assert_eq!(perplexity(&[0.0, 0.0]), 1.0);
        assert!((perplexity(&[-0.5, -0.5]) - 0.5f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn fictionality_prefixes() {
        use FictionalityVerdict::*;
        for (reply, want) in [
            ("No, this concept is fictional.", No),
            ("No.", No),
            ("no", No),
            ("It does not describe a real concept.", No),
            ("Yes.", Yes),
            ("  **Yes**, it is a well known idea", Yes),
            ("Nope", Unparseable),
            ("Yesterday I learned", Unparseable),
            ("I am not sure.", Unparseable),
            ("", Unparseable),
        ] {
            assert_eq!(parse_fictionality(reply), want, "{reply:?}");
        }
    }

    #[test]
    fn probe_record_serializes_with_tag() {
        let r = ProbeRecord::Fictionality(FictionalityRecord {
            question_id: "q".into(),
            am_id: "a".into(),
            topic: "t".into(),
            reply: "No.".into(),
            verdict: FictionalityVerdict::No,
        });
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.starts_with(r#"{"probe":"fictionality""#));
        assert_eq!(serde_json::from_str::<ProbeRecord>(&s).unwrap(), r);
    }
}
