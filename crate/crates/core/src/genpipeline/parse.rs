//! Line-oriented parsing of generated questions.
//!
//! Tolerant mode accepts the drift seen in real generations: markdown
//! emphasis, `A)` / `A:` / `(A)` choice markers, `Correct answer:` lines and
//! explanations after the answer letter. Strict mode accepts only the exact
//! template layout.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strictness {
    #[default]
    Tolerant,
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailure {
    #[error("no answer line")]
    NoAnswerLine,
    #[error("choices are not exactly A-D")]
    BadChoiceCount,
    #[error("answer names more than one choice")]
    AmbiguousAnswer,
    #[error("empty question statement")]
    EmptyStatement,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct McqBlock {
    pub statement: String,
    pub choices: Vec<String>,
    pub correct_label: Label,
}

static TOLERANT_CHOICE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\(?([A-D])\s*[\.\):]\s*(.*)$").unwrap());
static STRICT_CHOICE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^([A-D])\. (.+)$").unwrap());
static TOLERANT_ANSWER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^(?:the\s+)?(?:correct\s+|final\s+)?answer(?:\s+is\s*[:\-]?|\s*[:\-])\s*(.*)$").unwrap()
});
static STRICT_ANSWER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^Answer: (.+)$").unwrap());
static TOLERANT_QUESTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^question(?:\s*\d+)?\s*(?:[:\.]\s*(.*))?$").unwrap());
static STRICT_QUESTION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^Question(?: \d+)?: (.*)$").unwrap());
static NUMBERED_HEADER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)^question\s*(\d+)\s*[:\.]").unwrap());
static LEADING_LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[\(\[]?([A-E])(?:$|[^A-Za-z0-9'])").unwrap());
static MULTI_LETTER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^[\(\[]?([A-E])[\)\]]?\s*(?:,|/|&|\band\b|\bor\b)\s*[\(\[]?([A-E])(?:$|[^A-Za-z0-9])").unwrap()
});
static ANY_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:^|[^A-Za-z0-9'])([A-E])(?:$|[^A-Za-z0-9'])").unwrap());

/// Strips markdown emphasis and heading markers.
pub(crate) fn clean_line(line: &str) -> String {
    let mut s = line.trim().replace("**", "").replace("__", "");
    while s.starts_with('#') {
        s.remove(0);
    }
    let s = s.trim();
    let s = s.strip_prefix("- ").unwrap_or(s);
    s.trim_matches(|c| c == '*' || c == '_').trim().to_string()
}

/// Content after an `Answer:`-style prefix, if the cleaned line has one.
pub(crate) fn answer_line_content(cleaned: &str) -> Option<String> {
    TOLERANT_ANSWER.captures(cleaned).map(|c| c[1].trim().to_string())
}

/// Letter chosen in the content of an answer line. Letters outside `allowed`
/// are ignored. `Ok(None)` means no letter was found.
pub(crate) fn answer_letter(
    content: &str,
    allowed: &[char],
    strictness: Strictness,
) -> Result<Option<char>, ParseFailure> {
    let content = content.trim();
    let ok = |c: char| allowed.contains(&c);
    if strictness == Strictness::Strict {
        let mut chars = content.chars();
        return Ok(match (chars.next(), chars.next()) {
            (Some(c), None | Some('.') | Some(')') | Some(' ')) if ok(c) => Some(c),
            _ => None,
        });
    }
    if let Some(m) = MULTI_LETTER.captures(content) {
        let (a, b) = (m[1].chars().next().unwrap(), m[2].chars().next().unwrap());
        if a != b && ok(a) && ok(b) {
            return Err(ParseFailure::AmbiguousAnswer);
        }
    }
    if let Some(m) = LEADING_LETTER.captures(content) {
        let c = m[1].chars().next().unwrap();
        if ok(c) {
            return Ok(Some(c));
        }
    }
    Ok(ANY_LETTER.captures_iter(content).map(|m| m[1].chars().next().unwrap()).find(|&c| ok(c)))
}

const MCQ_LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

/// Parses one generated question in the `Question / A-D / Answer` layout.
pub fn parse_mcq_block(text: &str, strictness: Strictness) -> Result<McqBlock, ParseFailure> {
    let strict = strictness == Strictness::Strict;
    let lines: Vec<String> = if strict {
        text.lines().map(|l| l.trim_end().to_string()).collect()
    } else {
        text.lines().map(clean_line).collect()
    };
    let (answer_re, choice_re, question_re) = if strict {
        (&*STRICT_ANSWER, &*STRICT_CHOICE, &*STRICT_QUESTION)
    } else {
        (&*TOLERANT_ANSWER, &*TOLERANT_CHOICE, &*TOLERANT_QUESTION)
    };

    // The first answer line after a full set of choices.
    let choice_at = |i: usize| -> Option<(Label, String)> {
        let c = choice_re.captures(&lines[i])?;
        Some((Label::from_letter(c[1].chars().next()?)?, c[2].trim().to_string()))
    };
    let answer_idx = (0..lines.len())
        .filter(|&i| answer_re.is_match(&lines[i]))
        .find(|&i| (0..i).filter(|&j| choice_at(j).is_some()).count() >= 4)
        .or_else(|| (0..lines.len()).rev().find(|&i| answer_re.is_match(&lines[i])))
        .ok_or(ParseFailure::NoAnswerLine)?;

    let choice_lines: Vec<(usize, Label, String)> =
        (0..answer_idx).filter_map(|i| choice_at(i).map(|(l, t)| (i, l, t))).collect();
    if choice_lines.len() < 4 {
        return Err(ParseFailure::BadChoiceCount);
    }
    let last4 = &choice_lines[choice_lines.len() - 4..];
    if !last4.iter().map(|(_, l, _)| *l).eq(Label::ALL) || last4.iter().any(|(_, _, t)| t.is_empty()) {
        return Err(ParseFailure::BadChoiceCount);
    }
    let first_choice = last4[0].0;
    let choices: Vec<String> = last4.iter().map(|(_, _, t)| t.clone()).collect();

    let head = &lines[..first_choice];
    let start = head.iter().rposition(|l| question_re.is_match(l));
    let statement = match start {
        Some(s) => {
            let caps = question_re.captures(&head[s]).expect("matched");
            let first = caps.get(1).map_or("", |m| m.as_str()).to_string();
            std::iter::once(first).chain(head[s + 1..].iter().cloned()).collect::<Vec<_>>().join("\n")
        }
        None if strict => return Err(ParseFailure::EmptyStatement),
        None => head.join("\n"),
    };
    let statement = statement.trim().to_string();
    if statement.is_empty() {
        return Err(ParseFailure::EmptyStatement);
    }

    let mut content = answer_re.captures(&lines[answer_idx]).expect("matched")[1].trim().to_string();
    if content.is_empty() && !strict {
        if let Some(next) = lines[answer_idx + 1..].iter().find(|l| !l.trim().is_empty()) {
            content = next.clone();
        }
    }
    let letter = match answer_letter(&content, &MCQ_LETTERS, strictness)? {
        Some(c) => c,
        None if !strict => {
            let bare = content.trim_end_matches(['.', '!']).trim();
            let idx = choices.iter().position(|c| c.eq_ignore_ascii_case(bare)).ok_or(ParseFailure::NoAnswerLine)?;
            Label::ALL[idx].letter()
        }
        None => return Err(ParseFailure::NoAnswerLine),
    };
    Ok(McqBlock { statement, choices, correct_label: Label::from_letter(letter).expect("A-D") })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum BatchFailure {
    #[error("found {found} numbered questions, expected 5")]
    WrongCount { found: usize },
    #[error("question {index}: {reason}")]
    Block { index: usize, reason: ParseFailure },
}

/// Splits a five-question completion into its numbered blocks and parses
/// each. Anything short of five clean blocks rejects the whole batch.
pub fn parse_sequential(text: &str, strictness: Strictness) -> Result<Vec<McqBlock>, BatchFailure> {
    let lines: Vec<&str> = text.lines().collect();
    let headers: Vec<(usize, usize)> = lines
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            let cleaned = clean_line(l);
            let n = NUMBERED_HEADER.captures(&cleaned)?[1].parse().ok()?;
            Some((i, n))
        })
        .collect();
    if headers.len() != 5 || !headers.iter().map(|(_, n)| *n).eq(1..=5) {
        let found = headers.len();
        return Err(BatchFailure::WrongCount { found });
    }
    headers
        .iter()
        .enumerate()
        .map(|(k, &(start, n))| {
            let end = headers.get(k + 1).map_or(lines.len(), |h| h.0);
            parse_mcq_block(&lines[start..end].join("\n"), strictness)
                .map_err(|reason| BatchFailure::Block { index: n, reason })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("context paragraph lacks Concept:/Content: markers")]
pub struct ContextParseFailure;

static CONCEPT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)^concept\s*:\s*(.*)$").unwrap());
static CONTENT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)^content\s*:\s*(.*)$").unwrap());

/// Extracts (concept name, paragraph) from a first-turn context generation.
pub fn parse_context(text: &str) -> Result<(String, String), ContextParseFailure> {
    let lines: Vec<String> = text.lines().map(clean_line).collect();
    let concept_idx = lines.iter().position(|l| CONCEPT.is_match(l)).ok_or(ContextParseFailure)?;
    let content_idx = lines.iter().position(|l| CONTENT.is_match(l)).ok_or(ContextParseFailure)?;
    let concept = CONCEPT.captures(&lines[concept_idx]).expect("matched")[1].trim().to_string();
    let first = CONTENT.captures(&lines[content_idx]).expect("matched")[1].to_string();
    let paragraph = std::iter::once(first)
        .chain(lines[content_idx + 1..].iter().cloned())
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string();
    if concept.is_empty() || paragraph.is_empty() {
        return Err(ContextParseFailure);
    }
    Ok((concept, paragraph))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DQ2: &str = "Question: In the sacred texts of the Zorban faith, which celestial event is believed to herald the imminent return of the Enlightened Sage Paulasha?\n\nA. The Convergence of the Five Stars\nB. The Dance of the Solar Serpents\nC. The Eclipse of the Twin Moons\nD. The Rising of the Blue Comet\n\nAnswer: D";

    #[test]
    fn parses_template_output() {
        let b = parse_mcq_block(DQ2, Strictness::Tolerant).unwrap();
        assert!(b.statement.starts_with("In the sacred texts of the Zorban faith"));
        assert_eq!(b.choices[3], "The Rising of the Blue Comet");
        assert_eq!(b.correct_label, Label::D);
        assert_eq!(parse_mcq_block(DQ2, Strictness::Strict).unwrap(), b);
    }

    #[test]
    fn first_letter_rule_on_answer_line() {
        let t = DQ2.replace("Answer: D", "Answer: The correct choice is B");
        assert_eq!(parse_mcq_block(&t, Strictness::Tolerant).unwrap().correct_label, Label::B);
        assert!(parse_mcq_block(&t, Strictness::Strict).is_err());
    }

    #[test]
    fn missing_choice_is_bad_choice_count() {
        let t = DQ2.replace("D. The Rising of the Blue Comet\n", "");
        assert_eq!(parse_mcq_block(&t, Strictness::Tolerant), Err(ParseFailure::BadChoiceCount));
    }

    #[test]
    fn missing_answer_line() {
        let t = DQ2.replace("\n\nAnswer: D", "");
        assert_eq!(parse_mcq_block(&t, Strictness::Tolerant), Err(ParseFailure::NoAnswerLine));
    }

    #[test]
    fn two_letters_are_ambiguous() {
        let t = DQ2.replace("Answer: D", "Answer: B or D");
        assert_eq!(parse_mcq_block(&t, Strictness::Tolerant), Err(ParseFailure::AmbiguousAnswer));
    }

    #[test]
    fn markdown_and_paren_variants() {
        let t = "**Question:** Which isotope powers the Veltran drive?\n\nA) Xenon-7\nB) Helium-9\nC) Argon-3\nD) Neon-12\n\n**Answer:** C) Argon-3\n\nExplanation: because.";
        let b = parse_mcq_block(t, Strictness::Tolerant).unwrap();
        assert_eq!(b.statement, "Which isotope powers the Veltran drive?");
        assert_eq!(b.choices[1], "Helium-9");
        assert_eq!(b.correct_label, Label::C);
    }

    #[test]
    fn answer_given_as_choice_text() {
        let t = DQ2.replace("Answer: D", "Answer: The Eclipse of the Twin Moons.");
        assert_eq!(parse_mcq_block(&t, Strictness::Tolerant).unwrap().correct_label, Label::C);
    }

    #[test]
    fn sequential_batch_of_five() {
        let batch: String = (1..=5)
            .map(|i| format!("Question {i}: Statement {i}?\n\nA. a{i}\nB. b{i}\nC. c{i}\nD. d{i}\n\nAnswer: B\n\n"))
            .collect();
        let v = parse_sequential(&batch, Strictness::Tolerant).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v[4].statement, "Statement 5?");
        let four: String = batch.split("Question 5").next().unwrap().to_string();
        assert_eq!(parse_sequential(&four, Strictness::Tolerant), Err(BatchFailure::WrongCount { found: 4 }));
        let broken = batch.replace("D. d3\n", "");
        assert!(matches!(parse_sequential(&broken, Strictness::Tolerant), Err(BatchFailure::Block { index: 3, .. })));
    }

    #[test]
    fn context_markers() {
        let (c, p) =
            parse_context("Concept: Fluxionality\n\nContent: Fluxionality is the tendency.\nIt grows.").unwrap();
        assert_eq!(c, "Fluxionality");
        assert_eq!(p, "Fluxionality is the tendency.\nIt grows.");
        assert_eq!(parse_context("Concept: X\n\nSome paragraph"), Err(ContextParseFailure));
    }

    proptest! {
        #[test]
        fn render_then_parse_round_trips(
            statement in "[a-z][a-zA-Z0-9 ,']{0,60}[a-z?]",
            choices in proptest::collection::vec("[a-z0-9][a-zA-Z0-9 ,'-]{0,30}[a-z0-9]", 4),
            label in 0usize..4,
            strict in any::<bool>(),
        ) {
            let label = Label::ALL[label];
            let text = crate::prompts::render_mcq(&statement, &choices, label);
            let mode = if strict { Strictness::Strict } else { Strictness::Tolerant };
            let b = parse_mcq_block(&text, mode).unwrap();
            prop_assert_eq!(b.statement, statement);
            prop_assert_eq!(b.choices, choices);
            prop_assert_eq!(b.correct_label, label);
        }
    }
}
