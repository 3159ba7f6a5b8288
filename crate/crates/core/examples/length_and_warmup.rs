//! Where the correct choice falls in the length ranking, and how questions
//! split into length deciles.
//!
//! cargo run --example length_and_warmup

use iqa::analysis::{decile_bins, length_rank, length_rank_distribution};
use iqa::domain::{Label, Mode, Question};

fn main() {
    let choices = [
        ["short", "a bit longer", "the longest of all four", "mid length"],
        ["tiny", "also tiny", "an elaborate and detailed option", "medium one"],
        ["aa", "bb", "cc", "dd"],
    ];
    let qs: Vec<Question> = choices
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Question::new(
                "qm",
                Mode::Direct,
                "physics",
                i as u32,
                format!("Question {i}?"),
                c.iter().map(|s| s.to_string()).collect(),
                Label::C,
                None,
                None,
                format!("raw {i}"),
            )
        })
        .collect();
    for q in &qs {
        println!("{:?}: correct choice C ranks {}", q.choices, length_rank(q, Label::C));
    }
    let refs: Vec<&Question> = qs.iter().collect();
    let d = length_rank_distribution("qm", Mode::Direct, &refs).expect("questions");
    println!("rank fractions (shortest..longest): {:?}", d.fractions);
    let sizes: Vec<usize> = decile_bins(25).iter().map(|r| r.len()).collect();
    println!("25 questions in deciles: {sizes:?}");
}
