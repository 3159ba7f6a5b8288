//! Parses raw question-model completions: a single question, a five-question
//! batch and a context paragraph.
//!
//! cargo run --example parse_generation

use iqa::genpipeline::parse::{parse_context, parse_mcq_block, parse_sequential, Strictness};

const DIRECT: &str = "**Question:** In the sacred texts of the Zorban faith, which celestial event is \
believed to herald the imminent return of the Enlightened Sage Paulasha?

A) The Convergence of the Five Stars
B) The Dance of the Solar Serpents
C) The Eclipse of the Twin Moons
D) The Rising of the Blue Comet

**Answer:** D) The Rising of the Blue Comet";

const CONTEXT: &str = "Concept: Narrative Resonance

Content: Narrative Resonance is the degree to which a story's archetypes and motifs echo \
experiences shared by its readers.";

fn main() {
    for strictness in [Strictness::Tolerant, Strictness::Strict] {
        match parse_mcq_block(DIRECT, strictness) {
            Ok(b) => println!("{strictness:?}: correct {} of {:?}", b.correct_label, b.choices),
            Err(e) => println!("{strictness:?}: rejected ({e})"),
        }
    }

    let batch: String = (1..=5)
        .map(|i| format!("Question {i}: What is concept {i}?\n\nA. one\nB. two\nC. three\nD. four\n\nAnswer: B\n\n"))
        .collect();
    let blocks = parse_sequential(&batch, Strictness::Tolerant).expect("five blocks");
    println!("batch: {} questions, first statement {:?}", blocks.len(), blocks[0].statement);
    let four = batch.replace("Question 5", "Note");
    println!("four-question batch: {:?}", parse_sequential(&four, Strictness::Tolerant).unwrap_err());

    let (concept, paragraph) = parse_context(CONTEXT).expect("context");
    println!("context: {concept} / {} chars", paragraph.len());
}
