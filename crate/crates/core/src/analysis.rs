//! Structural analyses over stored questions and answers: length rank of the
//! correct choice, warm-up curves, cross-model embedding similarity, word
//! frequencies and embedding export.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AnswerRecord, Label, MetricCell, Mode, PresentationKind, Question};
use crate::metrics::{compute_kappa_alpha, join, Graded};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("missing embeddings for {} questions", .0.len())]
    MissingEmbeddings(Vec<String>),
    #[error("no topic has questions from both models")]
    NoSharedTopics,
}

/// Rank (1 = shortest, 4 = longest) of `label` by character count among the
/// four choices. Equal lengths rank by label order.
pub fn length_rank(q: &Question, label: Label) -> usize {
    let len = |l: Label| q.choice(l).chars().count();
    let (n, i) = (len(label), label.index());
    1 + Label::ALL.iter().filter(|&&o| o != label && (len(o) < n || (len(o) == n && o.index() < i))).count()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthRankDistribution {
    pub qm_id: String,
    pub mode: Mode,
    /// Fraction of questions whose correct choice has rank 1..4.
    pub fractions: [f64; 4],
    pub n: usize,
}

/// `None` for an empty set.
pub fn length_rank_distribution(qm_id: &str, mode: Mode, questions: &[&Question]) -> Option<LengthRankDistribution> {
    if questions.is_empty() {
        return None;
    }
    let mut counts = [0usize; 4];
    for q in questions {
        counts[length_rank(q, q.correct_label) - 1] += 1;
    }
    let n = questions.len();
    Some(LengthRankDistribution { qm_id: qm_id.to_string(), mode, fractions: counts.map(|c| c as f64 / n as f64), n })
}

/// Splits `n` items into ten contiguous ranges whose sizes differ by at most
/// one, larger ranges first. Some ranges are empty when `n < 10`.
pub fn decile_bins(n: usize) -> Vec<Range<usize>> {
    let (base, extra) = (n / 10, n % 10);
    let mut start = 0;
    (0..10)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    SequenceIndex,
    LengthDecile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmupCurve {
    pub grouping: Grouping,
    /// (am, group) → cell; groups are 1..=5 or 1..=10.
    pub cells: BTreeMap<(String, usize), MetricCell>,
    /// Length-rank distribution of the questions in each group.
    pub length_ranks: BTreeMap<usize, LengthRankDistribution>,
}

fn curve(
    grouping: Grouping,
    mode: Mode,
    group_of: &HashMap<&str, usize>,
    questions: &HashMap<String, Question>,
    answers: &[AnswerRecord],
    kind: PresentationKind,
) -> WarmupCurve {
    let mut groups: BTreeMap<(String, usize), Vec<Graded>> = BTreeMap::new();
    for (q, a) in join(questions, answers, kind) {
        if let Some(&g) = group_of.get(q.question_id.as_str()) {
            groups
                .entry((a.am_id.clone(), g))
                .or_default()
                .push(Graded { outcome: a.outcome, correct: q.correct_label });
        }
    }
    let cells = groups
        .into_iter()
        .map(|((am, g), v)| {
            let cell = compute_kappa_alpha("*", &am, mode, &v);
            ((am, g), cell)
        })
        .collect();
    let mut by_group: BTreeMap<usize, Vec<&Question>> = BTreeMap::new();
    for (id, &g) in group_of {
        if let Some(q) = questions.get(*id) {
            by_group.entry(g).or_default().push(q);
        }
    }
    let length_ranks =
        by_group.into_iter().filter_map(|(g, qs)| length_rank_distribution("*", mode, &qs).map(|d| (g, d))).collect();
    WarmupCurve { grouping, cells, length_ranks }
}

/// κ/α by position within sequential batches.
pub fn warmup_by_order(
    questions: &HashMap<String, Question>,
    answers: &[AnswerRecord],
    kind: PresentationKind,
) -> WarmupCurve {
    let group_of: HashMap<&str, usize> = questions
        .values()
        .filter(|q| q.mode == Mode::Sequential)
        .filter_map(|q| q.sequence_index.map(|i| (q.question_id.as_str(), usize::from(i))))
        .collect();
    curve(Grouping::SequenceIndex, Mode::Sequential, &group_of, questions, answers, kind)
}

/// κ/α by length decile. `ordered` fixes the tie order for equal lengths;
/// the sort is stable.
pub fn warmup_by_length(
    mode: Mode,
    ordered: &[&Question],
    questions: &HashMap<String, Question>,
    answers: &[AnswerRecord],
    kind: PresentationKind,
) -> WarmupCurve {
    let mut sorted: Vec<&Question> = ordered.iter().copied().filter(|q| q.mode == mode).collect();
    sorted.sort_by_key(|q| q.char_length);
    let mut group_of = HashMap::new();
    for (i, r) in decile_bins(sorted.len()).into_iter().enumerate() {
        for q in &sorted[r] {
            group_of.insert(q.question_id.as_str(), i + 1);
        }
    }
    curve(Grouping::LengthDecile, mode, &group_of, questions, answers, kind)
}

/// Question embeddings keyed by question id.
pub type Embeddings = HashMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub question_id: String,
    pub embedder_id: String,
    pub vector: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit-length copy of `v`; a zero vector stays zero.
fn unit(v: &[f64]) -> Vec<f64> {
    let norm = dot(v, v).sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / norm).collect()
}

fn vector_sum<'a>(vs: impl Iterator<Item = &'a Vec<f64>>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    for v in vs {
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
    }
    acc
}

/// Average over shared topics of the mean pairwise cosine similarity between
/// the two models' questions. Vectors are normalized first and the pair sum is
/// taken as the dot product of the per-model vector sums, which makes the
/// result exactly symmetric. With
/// `include_self = false` and `qm_1 == qm_2`, each question's pairing with
/// itself is dropped.
pub fn intra_topic_similarity(
    questions: &[&Question],
    embeddings: &Embeddings,
    qm_1: &str,
    qm_2: &str,
    mode: Mode,
    include_self: bool,
) -> Result<f64, AnalysisError> {
    let in_mode: Vec<&Question> = questions.iter().copied().filter(|q| q.mode == mode).collect();
    let missing: Vec<String> = in_mode
        .iter()
        .filter(|q| (q.qm_id == qm_1 || q.qm_id == qm_2) && !embeddings.contains_key(&q.question_id))
        .map(|q| q.question_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(AnalysisError::MissingEmbeddings(missing));
    }
    // Per topic: (qm_1 vectors, qm_2 vectors).
    type Sides = (Vec<Vec<f64>>, Vec<Vec<f64>>);
    let mut by_topic: BTreeMap<&str, Sides> = BTreeMap::new();
    for q in &in_mode {
        if q.qm_id != qm_1 && q.qm_id != qm_2 {
            continue;
        }
        let e = unit(&embeddings[&q.question_id]);
        let entry = by_topic.entry(q.topic.as_str()).or_default();
        if q.qm_id == qm_1 {
            entry.0.push(e.clone());
        }
        if q.qm_id == qm_2 {
            entry.1.push(e);
        }
    }
    let same = qm_1 == qm_2;
    let mut total = 0.0;
    let mut topics = 0usize;
    for (a, b) in by_topic.values() {
        let (na, nb) = (a.len(), b.len());
        if na == 0 || nb == 0 {
            continue;
        }
        let pair_sum = dot(&vector_sum(a.iter()), &vector_sum(b.iter()));
        let (sum, pairs) = if same && !include_self {
            if na < 2 {
                continue;
            }
            let selfs: f64 = a.iter().map(|v| dot(v, v)).sum();
            (pair_sum - selfs, na * (na - 1))
        } else {
            (pair_sum, na * nb)
        };
        total += sum / pairs as f64;
        topics += 1;
    }
    if topics == 0 {
        return Err(AnalysisError::NoSharedTopics);
    }
    Ok(total / topics as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityEntry {
    pub qm_1: String,
    pub qm_2: String,
    pub mode: Mode,
    pub similarity: f64,
    pub diagonal: bool,
}

/// Upper triangle (including the diagonal) of the similarity matrix for one
/// mode. Pairs without a shared topic are skipped.
pub fn similarity_matrix(
    questions: &[&Question],
    embeddings: &Embeddings,
    qms: &[String],
    mode: Mode,
    include_self: bool,
) -> Result<Vec<SimilarityEntry>, AnalysisError> {
    let mut out = Vec::new();
    for (i, a) in qms.iter().enumerate() {
        for b in &qms[i..] {
            match intra_topic_similarity(questions, embeddings, a, b, mode, include_self) {
                Ok(s) => out.push(SimilarityEntry {
                    qm_1: a.clone(),
                    qm_2: b.clone(),
                    mode,
                    similarity: s,
                    diagonal: a == b,
                }),
                Err(AnalysisError::NoSharedTopics) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// Small English function-word list used when no stopword file is given.
pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "all", "also", "am", "an", "and", "any", "are", "as", "at", "be",
    "because", "been", "before", "being", "between", "both", "but", "by", "can", "could", "did", "do", "does",
    "during", "each", "few", "for", "from", "further", "had", "has", "have", "having", "he", "her", "here", "his",
    "how", "i", "if", "in", "into", "is", "it", "its", "itself", "may", "more", "most", "no", "nor", "not", "of", "on",
    "once", "only", "or", "other", "our", "out", "over", "own", "same", "she", "should", "so", "some", "such", "than",
    "that", "the", "their", "them", "then", "there", "these", "they", "this", "those", "through", "to", "too", "under",
    "until", "up", "very", "was", "we", "were", "what", "when", "where", "which", "while", "who", "whom", "why",
    "will", "with", "would", "you", "your",
];

pub fn default_stopwords() -> HashSet<String> {
    DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect()
}

/// Lower-cased word counts with punctuation stripped and stopwords removed,
/// most frequent first, ties alphabetical.
pub fn word_frequency<S: AsRef<str>>(texts: &[S], stopwords: &HashSet<String>) -> Vec<(String, usize)> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in texts {
        for word in t.as_ref().split(|c: char| !(c.is_alphanumeric() || c == '\'')) {
            let w = word.trim_matches('\'').to_lowercase();
            if !w.is_empty() && !stopwords.contains(&w) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let mut out: Vec<_> = counts.into_iter().collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// TSV rows (id, topic, qm, mode, vector) for questions of `mode`, or all
/// modes when `None`, plus the ids that have no embedding.
pub fn export_embeddings(
    questions: &[&Question],
    embeddings: &Embeddings,
    mode: Option<Mode>,
) -> (String, Vec<String>) {
    let mut tsv = String::from("question_id\ttopic\tqm\tmode\tvector\n");
    let mut absent = Vec::new();
    for q in questions.iter().filter(|q| mode.is_none_or(|m| q.mode == m)) {
        match embeddings.get(&q.question_id) {
            Some(v) => {
                let vec = v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
                tsv.push_str(&format!("{}\t{}\t{}\t{}\t{vec}\n", q.question_id, q.topic, q.qm_id, q.mode));
            }
            None => absent.push(q.question_id.clone()),
        }
    }
    (tsv, absent)
}

/// Distinct topics in first-seen order.
pub fn topics_of(questions: &[&Question]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    questions.iter().filter(|q| seen.insert(q.topic.clone())).map(|q| q.topic.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn q_with(choices: [&str; 4], correct: Label) -> Question {
        Question::new(
            "qm",
            Mode::Context,
            "t",
            0,
            "s".into(),
            choices.iter().map(|c| c.to_string()).collect(),
            correct,
            None,
            None,
            format!("{choices:?}{correct}"),
        )
    }

    #[test]
    fn longest_correct_choice() {
        let q = q_with(["abc", "abcde", "abcdefg", "abcdefghi"], Label::D);
        let d = length_rank_distribution("qm", Mode::Context, &[&q]).unwrap();
        assert_eq!(d.fractions, [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn equal_lengths_rank_by_label() {
        let q = q_with(["aa", "bb", "cc", "dd"], Label::C);
        assert_eq!(length_rank(&q, Label::C), 3);
        assert_eq!(length_rank(&q, Label::A), 1);
    }

    #[test]
    fn ranks_count_characters_not_bytes() {
        let q = q_with(["ééé", "abcd", "x", "yy"], Label::A);
        assert_eq!(length_rank(&q, Label::A), 3);
    }

    #[test]
    fn decile_remainder_goes_first() {
        let sizes: Vec<usize> = decile_bins(25).iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 3, 3, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn word_counts() {
        let none = HashSet::new();
        let got = word_frequency(&["a b", "b c"], &none);
        assert_eq!(got, vec![("b".to_string(), 2), ("a".to_string(), 1), ("c".to_string(), 1)]);
        let stop: HashSet<String> = ["a".to_string()].into();
        assert_eq!(word_frequency(&["a b", "b c"], &stop), vec![("b".to_string(), 2), ("c".to_string(), 1)]);
        assert!(word_frequency::<&str>(&[], &none).is_empty());
        assert_eq!(word_frequency(&["The Principle, principle!"], &default_stopwords()), vec![("principle".into(), 2)]);
    }

    fn topic_q(qm: &str, topic: &str, i: usize) -> Question {
        Question::new(
            qm,
            Mode::Direct,
            topic,
            i as u32,
            format!("s{i}"),
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            Label::A,
            None,
            None,
            format!("{qm}{topic}{i}"),
        )
    }

    #[test]
    fn identical_and_orthogonal_embeddings() {
        let qs: Vec<Question> = (0..3).flat_map(|i| [topic_q("m1", "t", i), topic_q("m2", "t", i)]).collect();
        let refs: Vec<&Question> = qs.iter().collect();
        let same: Embeddings = qs.iter().map(|q| (q.question_id.clone(), vec![0.6, 0.8])).collect();
        let s = intra_topic_similarity(&refs, &same, "m1", "m2", Mode::Direct, true).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let orth: Embeddings = qs
            .iter()
            .map(|q| (q.question_id.clone(), if q.qm_id == "m1" { vec![1.0, 0.0] } else { vec![0.0, 1.0] }))
            .collect();
        assert_eq!(intra_topic_similarity(&refs, &orth, "m1", "m2", Mode::Direct, true).unwrap(), 0.0);
    }

    #[test]
    fn missing_embeddings_are_listed() {
        let qs = [topic_q("m1", "t", 0), topic_q("m2", "t", 0)];
        let refs: Vec<&Question> = qs.iter().collect();
        let e: Embeddings = [(qs[0].question_id.clone(), vec![1.0])].into();
        assert_eq!(
            intra_topic_similarity(&refs, &e, "m1", "m2", Mode::Direct, true),
            Err(AnalysisError::MissingEmbeddings(vec![qs[1].question_id.clone()]))
        );
    }

    #[test]
    fn self_pairs_can_be_excluded() {
        let qs = [topic_q("m", "t", 0), topic_q("m", "t", 1)];
        let refs: Vec<&Question> = qs.iter().collect();
        let e: Embeddings =
            [(qs[0].question_id.clone(), vec![1.0, 0.0]), (qs[1].question_id.clone(), vec![0.0, 1.0])].into();
        assert_eq!(intra_topic_similarity(&refs, &e, "m", "m", Mode::Direct, true).unwrap(), 0.5);
        assert_eq!(intra_topic_similarity(&refs, &e, "m", "m", Mode::Direct, false).unwrap(), 0.0);
    }

    #[test]
    fn export_filters_and_lists_absent() {
        let mut qs: Vec<Question> = (0..3).map(|i| topic_q("m", "t", i)).collect();
        qs[2].mode = Mode::Context;
        let refs: Vec<&Question> = qs.iter().collect();
        let e: Embeddings = [(qs[0].question_id.clone(), vec![1.0, 0.0])].into();
        let (tsv, absent) = export_embeddings(&refs, &e, Some(Mode::Direct));
        assert_eq!(tsv.lines().count(), 2);
        assert_eq!(absent, vec![qs[1].question_id.clone()]);
    }

    proptest! {
        #[test]
        fn fractions_sum_to_one(lens in prop::collection::vec(([1usize..9, 1..9, 1..9, 1..9], 0usize..4), 1..30)) {
            let qs: Vec<Question> = lens
                .iter()
                .map(|(l, c)| {
                    let ch: Vec<String> = l.iter().map(|n| "x".repeat(*n)).collect();
                    q_with([&ch[0], &ch[1], &ch[2], &ch[3]], Label::ALL[*c])
                })
                .collect();
            let refs: Vec<&Question> = qs.iter().collect();
            let d = length_rank_distribution("qm", Mode::Context, &refs).unwrap();
            prop_assert!((d.fractions.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn decile_bins_partition(n in 0usize..500) {
            let bins = decile_bins(n);
            prop_assert_eq!(bins.iter().map(|r| r.len()).sum::<usize>(), n);
            let max = bins.iter().map(|r| r.len()).max().unwrap();
            let min = bins.iter().map(|r| r.len()).min().unwrap();
            prop_assert!(max - min <= 1);
            for w in bins.windows(2) {
                prop_assert_eq!(w[0].end, w[1].start);
            }
        }

        #[test]
        fn similarity_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let qs: Vec<Question> = ["t1", "t2"]
                .iter()
                .flat_map(|t| (0..3).flat_map(move |i| [topic_q("m1", t, i), topic_q("m2", t, i)]))
                .collect();
            let refs: Vec<&Question> = qs.iter().collect();
            let e: Embeddings = qs
                .iter()
                .map(|q| (q.question_id.clone(), (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect();
            let a = intra_topic_similarity(&refs, &e, "m1", "m2", Mode::Direct, true).unwrap();
            let b = intra_topic_similarity(&refs, &e, "m2", "m1", Mode::Direct, true).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
