//! Shuffles a question's choices, renders the answer prompt and maps replies
//! back to the generator's labels.
//!
//! cargo run --example present_and_parse

use iqa::anspipeline::{parse_answer, present, record_rng};
use iqa::domain::{Label, Mode, Question};
use iqa::prompts::answer_prompt;

fn main() {
    let q = Question::new(
        "m1",
        Mode::Direct,
        "chemistry",
        0,
        "Which of the following elements is most likely to undergo a process known as \
         \"quantum tunneling\" in order to form a stable compound with a noble gas?"
            .into(),
        vec!["Nitrogen".into(), "Carbon".into(), "Oxygen".into(), "Hydrogen".into()],
        Label::D,
        None,
        None,
        String::new(),
    );
    // The permutation depends only on the run seed and the question id.
    let pres = present(&q, true, true, &mut record_rng(42, &q.question_id));
    println!("{}\n", answer_prompt(&pres.presented_text, true));
    let shown = pres.permutation.presented(Label::D);
    for reply in [
        format!("Answer: {shown}"),
        "The answer is E.".to_string(),
        "I apologize, but the question seems to be asking about a fictional concept, and hence I cannot answer it."
            .to_string(),
        "Hmm, hard to say.".to_string(),
    ] {
        println!("{reply:?} -> {:?}", parse_answer(&reply, &pres));
    }
}
