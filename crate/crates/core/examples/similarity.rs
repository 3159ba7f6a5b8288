//! Intra-topic cosine similarity between question models from toy
//! embeddings.
//!
//! cargo run --example similarity

use iqa::analysis::{similarity_matrix, Embeddings};
use iqa::domain::{Label, Mode, Question};

fn q(qm: &str, topic: &str, i: u32) -> Question {
    Question::new(
        qm,
        Mode::Direct,
        topic,
        i,
        format!("{topic} question {i} from {qm}"),
        vec!["a".into(), "b".into(), "c".into(), "d".into()],
        Label::A,
        None,
        None,
        format!("{qm}{topic}{i}"),
    )
}

fn main() {
    let mut questions = Vec::new();
    let mut emb = Embeddings::new();
    // Model "near" writes questions close to a shared direction per topic;
    // "far" drifts away from it.
    for (qm, drift) in [("near", 0.1), ("far", 0.9)] {
        for (t, topic) in ["physics", "law"].iter().enumerate() {
            for i in 0..3 {
                let question = q(qm, topic, i);
                let mut v = vec![0.0; 4];
                v[t] = 1.0;
                v[2 + (i as usize % 2)] = drift;
                emb.insert(question.question_id.clone(), v);
                questions.push(question);
            }
        }
    }
    let refs: Vec<&Question> = questions.iter().collect();
    let qms = vec!["near".to_string(), "far".to_string()];
    for include_self in [true, false] {
        println!("self pairs included: {include_self}");
        for e in similarity_matrix(&refs, &emb, &qms, Mode::Direct, include_self).expect("embeddings present") {
            println!("  {:>4} / {:<4} {:.4}", e.qm_1, e.qm_2, e.similarity);
        }
    }
}
