//! Prompt templates. Topic substitution is byte-exact; nothing else varies.

use crate::domain::{Label, Question};

pub const MCQ_TEMPLATE: &str = "Question: [question statement]\n\n\
A. [choice A]\n\
B. [choice B]\n\
C. [choice C]\n\
D. [choice D]\n\n\
Answer: [the correct choice]";

const FICTION_GUARD: &str = "In your question, do not say that the concept is hypothetical or \
fictional. Instead, treat it as if it were real and widely accepted. Use the following template:";

const STORY_GUARD: &str = "Do not explicitly reference the story in the question (i.e., do not \
use phrases such as \"in the story\" or \"according to the text\"). Use the following template:";

pub fn direct_question(topic: &str) -> String {
    format!(
        "On the topic of {topic}, please write a multiple choice question around a concept that \
         is completely made up. Try to make the problem hard and challenging. {FICTION_GUARD}\n\n\
         {MCQ_TEMPLATE}"
    )
}

pub fn context_paragraph(topic: &str) -> String {
    format!(
        "Imagine that you are writing a textbook. Please make up a concept in {topic} and explain \
         it with a single paragraph of text. Please write as if the concept is real, and \
         completely avoid saying that the concept is fictional or made-up. Be creative. Use the \
         following template:\n\n\
         Concept: [the name of the concept that you are writing about]\n\n\
         Content: [a single paragraph of text explaining the concept]"
    )
}

pub fn context_question() -> String {
    format!(
        "Now, based on the paragraph above, write a multiple choice question about this concept. \
         The question should be answerable using the paragraph. Try to make the problem hard and \
         challenging. {FICTION_GUARD}\n\n{MCQ_TEMPLATE}"
    )
}

pub fn sequential_questions(topic: &str) -> String {
    let mut s = format!(
        "On the topic of {topic}, please write five multiple choice questions around concepts \
         that are completely made up. Make sure that these questions are distinct from each \
         other. Try to make each problem hard and challenging. {FICTION_GUARD}"
    );
    for i in 1..=5 {
        s.push_str(&format!(
            "\n\nQuestion {i}: [question statement]\n\n\
             A. [choice A]\nB. [choice B]\nC. [choice C]\nD. [choice D]\n\n\
             Answer: [the correct choice]"
        ));
    }
    s
}

pub fn creative_direct_question(topic: &str) -> String {
    format!(
        "Imagine a story about {topic} with an intricate story plot. Without telling the story, \
         write a question about one of its details, and also indicate the correct answer. \
         {STORY_GUARD}\n\n{MCQ_TEMPLATE}"
    )
}

pub fn creative_story(topic: &str) -> String {
    format!(
        "You are an excellent writer. Write a short story of 3-5 paragraphs about {topic}. Be \
         creative, develop an intricate story plot and include lots of details."
    )
}

pub fn creative_context_question() -> String {
    format!(
        "Now, write a question about one of its details, and also indicate the correct answer. \
         {STORY_GUARD}\n\n{MCQ_TEMPLATE}"
    )
}

pub const CHOICE_E_TEXT: &str = "This question cannot be answered since the concept does not exist.";

/// Question body shown to an answer model: statement, blank line, lettered
/// choices in presented order.
pub fn question_body(statement: &str, presented_choices: &[&str], with_e: bool) -> String {
    let mut s = format!("{statement}\n");
    for (i, c) in presented_choices.iter().enumerate() {
        s.push_str(&format!("\n{}. {c}", Label::ALL[i]));
    }
    if with_e {
        s.push_str(&format!("\nE. {CHOICE_E_TEXT}"));
    }
    s
}

pub fn answer_prompt(body: &str, with_e: bool) -> String {
    let letters = if with_e { "A, B, C, D or E" } else { "A, B, C or D" };
    format!(
        "Answer the following question. Be concise and give the answer only.\n\n{body}\n\n\
         Write your response in the following format:\n\
         Answer: [the letter ({letters}) of the selected choice]"
    )
}

/// User turn for perplexity scoring; the question is shown without choices.
pub fn perplexity_user(statement: &str) -> String {
    format!("Answer the following question.\n\n{statement}")
}

pub const PERPLEXITY_ASSISTANT_PREFIX: &str = "Answer: ";

/// Plain-text context for next-token letter scoring, ending right before
/// the answer letter.
pub fn letter_context(q: &Question) -> String {
    let mut s = format!("Question: {}\n\n", q.statement);
    for l in Label::ALL {
        s.push_str(&format!("{l}: {}\n", q.choice(l)));
    }
    s.push_str("\nAnswer:");
    s
}

pub fn fictionality_query(topic: &str, paragraph: &str) -> String {
    format!("Does the following paragraph describe a real concept in {topic}?\n\n{paragraph}")
}

/// Renders a question back into the generation template.
pub fn render_mcq(statement: &str, choices: &[String], correct: Label) -> String {
    format!(
        "Question: {statement}\n\nA. {}\nB. {}\nC. {}\nD. {}\n\nAnswer: {correct}",
        choices[0], choices[1], choices[2], choices[3]
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_prompt_matches_template() {
        let expected = "On the topic of physics, please write a multiple choice question around a concept that is completely made up. Try to make the problem hard and challenging. In your question, do not say that the concept is hypothetical or fictional. Instead, treat it as if it were real and widely accepted. Use the following template:\n\nQuestion: [question statement]\n\nA. [choice A]\nB. [choice B]\nC. [choice C]\nD. [choice D]\n\nAnswer: [the correct choice]";
        assert_eq!(direct_question("physics"), expected);
    }

    #[test]
    fn context_prompts_match_template() {
        assert_eq!(
            context_paragraph("physics"),
            "Imagine that you are writing a textbook. Please make up a concept in physics and explain it with a single paragraph of text. Please write as if the concept is real, and completely avoid saying that the concept is fictional or made-up. Be creative. Use the following template:\n\nConcept: [the name of the concept that you are writing about]\n\nContent: [a single paragraph of text explaining the concept]"
        );
        assert!(context_question().starts_with(
            "Now, based on the paragraph above, write a multiple choice question about this concept. The question should be answerable using the paragraph. Try to make the problem hard and challenging. In your question"
        ));
        assert!(context_question().ends_with(MCQ_TEMPLATE));
    }

    #[test]
    fn creative_prompts_match_template() {
        assert_eq!(
            creative_story("friendship"),
            "You are an excellent writer. Write a short story of 3-5 paragraphs about friendship. Be creative, develop an intricate story plot and include lots of details."
        );
        assert!(creative_direct_question("a roadtrip").starts_with(
            "Imagine a story about a roadtrip with an intricate story plot. Without telling the story, write a question about one of its details, and also indicate the correct answer. Do not explicitly reference the story in the question (i.e., do not use phrases such as \"in the story\" or \"according to the text\"). Use the following template:\n\nQuestion: "
        ));
        assert!(creative_context_question().starts_with("Now, write a question about one of its details"));
    }

    #[test]
    fn sequential_prompt_lists_five_slots() {
        let p = sequential_questions("law");
        assert!(p.starts_with("On the topic of law, please write five multiple choice questions around concepts that are completely made up. Make sure that these questions are distinct from each other. Try to make each problem hard and challenging."));
        assert!(p.contains("Use the following template:\n\nQuestion 1: [question statement]\n\nA. [choice A]"));
        assert!(p.ends_with("Question 5: [question statement]\n\nA. [choice A]\nB. [choice B]\nC. [choice C]\nD. [choice D]\n\nAnswer: [the correct choice]"));
    }

    #[test]
    fn answer_prompt_layout() {
        let body = question_body("Q?", &["w", "x", "y", "z"], false);
        assert_eq!(
            answer_prompt(&body, false),
            "Answer the following question. Be concise and give the answer only.\n\nQ?\n\nA. w\nB. x\nC. y\nD. z\n\nWrite your response in the following format:\nAnswer: [the letter (A, B, C or D) of the selected choice]"
        );
        let e = answer_prompt(&question_body("Q?", &["w", "x", "y", "z"], true), true);
        assert!(e.contains("D. z\nE. This question cannot be answered since the concept does not exist.\n\n"));
        assert!(e.ends_with("(A, B, C, D or E) of the selected choice]"));
    }
}
