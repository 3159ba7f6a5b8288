//! Correctness rate κ and answering rate α, their breakdowns and the probe
//! rates. Everything here is a pure function of stored records.
//!
//! κ = #correct / #answered, α = #answered / N. A reply counts as answered
//! when it selects a letter; refusals and parse errors do not.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::Serialize;
use thiserror::Error;

use crate::domain::{AnswerRecord, Label, MetricCell, Mode, ModelSpec, Outcome, PresentationKind, Question, Role};
use crate::probes::{FictionalityRecord, FictionalityVerdict};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no records for pairs: {}", fmt_pairs(.0))]
    MissingPairs(Vec<(String, String)>),
    #[error("matrices cover different (qm, am, mode) cells")]
    SupportMismatch,
}

fn fmt_pairs(p: &[(String, String)]) -> String {
    p.iter().map(|(q, a)| format!("{q}/{a}")).collect::<Vec<_>>().join(", ")
}

/// One AM outcome paired with the QM-designated answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Graded {
    pub outcome: Outcome,
    pub correct: Label,
}

pub fn compute_kappa_alpha(qm_id: &str, am_id: &str, mode: Mode, graded: &[Graded]) -> MetricCell {
    let mut cell = MetricCell {
        qm_id: qm_id.to_string(),
        am_id: am_id.to_string(),
        mode,
        kappa: None,
        alpha: 0.0,
        n_total: graded.len(),
        n_answered: 0,
        n_correct: 0,
        n_refused: 0,
        n_parse_error: 0,
        n_selected_e: 0,
    };
    for g in graded {
        match g.outcome {
            Outcome::Selected(l) => {
                cell.n_answered += 1;
                if l == g.correct {
                    cell.n_correct += 1;
                }
            }
            Outcome::SelectedE => {
                cell.n_answered += 1;
                cell.n_selected_e += 1;
            }
            Outcome::Refused => cell.n_refused += 1,
            Outcome::ParseError => cell.n_parse_error += 1,
        }
    }
    if cell.n_answered > 0 {
        cell.kappa = Some(cell.n_correct as f64 / cell.n_answered as f64);
    }
    if cell.n_total > 0 {
        cell.alpha = cell.n_answered as f64 / cell.n_total as f64;
    }
    cell
}

/// Answer records of one presentation kind joined to their questions, with
/// duplicate (question, am) records dropped.
pub fn join<'a>(
    questions: &'a HashMap<String, Question>,
    answers: &'a [AnswerRecord],
    kind: PresentationKind,
) -> Vec<(&'a Question, &'a AnswerRecord)> {
    let mut seen = HashSet::new();
    answers
        .iter()
        .filter(|a| a.kind() == kind)
        .filter(|a| seen.insert((a.question_id.as_str(), a.am_id.as_str())))
        .filter_map(|a| questions.get(&a.question_id).map(|q| (q, a)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Average {
    /// Mean κ over cells where κ is defined.
    pub kappa: Option<f64>,
    pub alpha: Option<f64>,
}

fn average<'a>(cells: impl Iterator<Item = &'a MetricCell>) -> Average {
    let (mut ks, mut n_k, mut as_, mut n_a) = (0.0, 0usize, 0.0, 0usize);
    for c in cells {
        if let Some(k) = c.kappa {
            ks += k;
            n_k += 1;
        }
        as_ += c.alpha;
        n_a += 1;
    }
    Average { kappa: (n_k > 0).then(|| ks / n_k as f64), alpha: (n_a > 0).then(|| as_ / n_a as f64) }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyBlock {
    pub family: String,
    pub members: Vec<String>,
}

/// Contiguous runs of models sharing a family, in the given order.
pub fn family_blocks(ids: &[String], models: &[ModelSpec]) -> Vec<FamilyBlock> {
    let family: HashMap<&str, &str> = models.iter().map(|m| (m.id.as_str(), m.family.as_str())).collect();
    let mut blocks: Vec<FamilyBlock> = Vec::new();
    for id in ids {
        let f = family.get(id.as_str()).copied().unwrap_or("").to_string();
        match blocks.last_mut() {
            Some(b) if b.family == f => b.members.push(id.clone()),
            _ => blocks.push(FamilyBlock { family: f, members: vec![id.clone()] }),
        }
    }
    blocks
}

/// κ/α for every (QM, AM) pair of one mode and presentation kind.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMatrix {
    pub mode: Mode,
    pub kind: PresentationKind,
    pub qms: Vec<String>,
    pub ams: Vec<String>,
    pub cells: BTreeMap<(String, String), MetricCell>,
    pub row_avg: BTreeMap<String, Average>,
    pub col_avg: BTreeMap<String, Average>,
    pub overall: Average,
    /// The four AMs with the highest κ for each QM.
    pub top4: BTreeMap<String, Vec<String>>,
    pub qm_blocks: Vec<FamilyBlock>,
    pub am_blocks: Vec<FamilyBlock>,
    /// Pairs of the configured roster with no records.
    pub missing: Vec<(String, String)>,
}

impl MetricMatrix {
    pub fn cell(&self, qm: &str, am: &str) -> Option<&MetricCell> {
        self.cells.get(&(qm.to_string(), am.to_string()))
    }
}

/// Builds the matrix over every configured QM × AM pair, listing pairs
/// without records in `missing` instead of failing.
pub fn matrix_from_records(
    questions: &HashMap<String, Question>,
    answers: &[AnswerRecord],
    mode: Mode,
    kind: PresentationKind,
    models: &[ModelSpec],
) -> MetricMatrix {
    let qms: Vec<String> = models.iter().filter(|m| m.has_role(Role::QuestionModel)).map(|m| m.id.clone()).collect();
    let ams: Vec<String> = models.iter().filter(|m| m.has_role(Role::AnswerModel)).map(|m| m.id.clone()).collect();

    let mut groups: BTreeMap<(String, String), Vec<Graded>> = BTreeMap::new();
    for (q, a) in join(questions, answers, kind) {
        if q.mode == mode {
            groups
                .entry((q.qm_id.clone(), a.am_id.clone()))
                .or_default()
                .push(Graded { outcome: a.outcome, correct: q.correct_label });
        }
    }
    let mut cells = BTreeMap::new();
    let mut missing = Vec::new();
    for qm in &qms {
        for am in &ams {
            let key = (qm.clone(), am.clone());
            match groups.get(&key) {
                Some(g) => {
                    cells.insert(key, compute_kappa_alpha(qm, am, mode, g));
                }
                None => missing.push(key),
            }
        }
    }
    let row_avg = qms.iter().map(|qm| (qm.clone(), average(cells.values().filter(|c| &c.qm_id == qm)))).collect();
    let col_avg = ams.iter().map(|am| (am.clone(), average(cells.values().filter(|c| &c.am_id == am)))).collect();
    let top4 = qms
        .iter()
        .map(|qm| {
            let mut row: Vec<(usize, &MetricCell)> = ams
                .iter()
                .enumerate()
                .filter_map(|(i, am)| cells.get(&(qm.clone(), am.clone())).map(|c| (i, c)))
                .filter(|(_, c)| c.kappa.is_some())
                .collect();
            row.sort_by(|(i, a), (j, b)| b.kappa.partial_cmp(&a.kappa).expect("finite").then(i.cmp(j)));
            (qm.clone(), row.iter().take(4).map(|(_, c)| c.am_id.clone()).collect())
        })
        .collect();
    MetricMatrix {
        mode,
        kind,
        overall: average(cells.values()),
        qm_blocks: family_blocks(&qms, models),
        am_blocks: family_blocks(&ams, models),
        qms,
        ams,
        cells,
        row_avg,
        col_avg,
        top4,
        missing,
    }
}

/// Like [`matrix_from_records`] but every configured pair must have records.
pub fn build_matrix(
    questions: &HashMap<String, Question>,
    answers: &[AnswerRecord],
    mode: Mode,
    kind: PresentationKind,
    models: &[ModelSpec],
) -> Result<MetricMatrix, MetricsError> {
    let m = matrix_from_records(questions, answers, mode, kind, models);
    if m.missing.is_empty() {
        Ok(m)
    } else {
        Err(MetricsError::MissingPairs(m.missing))
    }
}

/// Per (AM, topic) cells for one mode, pooled over QMs (`qm_id` is `*`).
#[derive(Debug, Clone, PartialEq)]
pub struct TopicBreakdown {
    pub mode: Mode,
    pub cells: BTreeMap<(String, String), MetricCell>,
}

pub fn topic_breakdown(
    questions: &HashMap<String, Question>,
    answers: &[AnswerRecord],
    mode: Mode,
    kind: PresentationKind,
) -> TopicBreakdown {
    let mut groups: BTreeMap<(String, String), Vec<Graded>> = BTreeMap::new();
    for (q, a) in join(questions, answers, kind) {
        if q.mode == mode {
            groups
                .entry((a.am_id.clone(), q.topic.clone()))
                .or_default()
                .push(Graded { outcome: a.outcome, correct: q.correct_label });
        }
    }
    let cells = groups
        .into_iter()
        .map(|((am, topic), g)| {
            let cell = compute_kappa_alpha("*", &am, mode, &g);
            ((am, topic), cell)
        })
        .collect();
    TopicBreakdown { mode, cells }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaCell {
    pub qm_id: String,
    pub am_id: String,
    pub mode: Mode,
    /// Native minus shuffled; undefined when either κ is.
    pub d_kappa: Option<f64>,
    pub d_alpha: f64,
}

/// Native-order minus shuffled-order κ and α, cell by cell.
pub fn native_order_delta(shuffled: &MetricMatrix, native: &MetricMatrix) -> Result<Vec<DeltaCell>, MetricsError> {
    let support = |m: &MetricMatrix| m.cells.keys().cloned().collect::<BTreeSet<_>>();
    if shuffled.mode != native.mode || support(shuffled) != support(native) {
        return Err(MetricsError::SupportMismatch);
    }
    Ok(shuffled
        .cells
        .iter()
        .map(|(key, s)| {
            let n = &native.cells[key];
            DeltaCell {
                qm_id: key.0.clone(),
                am_id: key.1.clone(),
                mode: s.mode,
                d_kappa: match (n.kappa, s.kappa) {
                    (Some(a), Some(b)) => Some(a - b),
                    _ => None,
                },
                d_alpha: n.alpha - s.alpha,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ProbeRates {
    pub n_answered: usize,
    pub n_selected_e: usize,
    /// SelectedE over replies that picked any letter.
    pub e_selection_rate: Option<f64>,
    pub n_no: usize,
    pub n_yes: usize,
    pub n_unparseable: usize,
    /// "No" over parseable fictionality replies.
    pub fictionality_detection_rate: Option<f64>,
}

pub fn probe_rates(e_records: &[AnswerRecord], fictionality: &[FictionalityRecord]) -> ProbeRates {
    let mut r = ProbeRates::default();
    for a in e_records {
        match a.outcome {
            Outcome::SelectedE => {
                r.n_answered += 1;
                r.n_selected_e += 1;
            }
            Outcome::Selected(_) => r.n_answered += 1,
            _ => {}
        }
    }
    for f in fictionality {
        match f.verdict {
            FictionalityVerdict::No => r.n_no += 1,
            FictionalityVerdict::Yes => r.n_yes += 1,
            FictionalityVerdict::Unparseable => r.n_unparseable += 1,
        }
    }
    r.e_selection_rate = (r.n_answered > 0).then(|| r.n_selected_e as f64 / r.n_answered as f64);
    let parsed = r.n_no + r.n_yes;
    r.fictionality_detection_rate = (parsed > 0).then(|| r.n_no as f64 / parsed as f64);
    r
}

/// Shortest round-trip decimal; undefined values render blank.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const MATRIX_HEADER: [&str; 14] = [
    "qm",
    "am",
    "mode",
    "kappa",
    "alpha",
    "n_total",
    "n_answered",
    "n_correct",
    "presentation",
    "n_refused",
    "n_parse_error",
    "n_selected_e",
    "top4",
    "qm_family",
];

/// Writes one row per cell, QM-major in roster order.
pub fn write_matrix_csv<W: std::io::Write>(
    w: &mut csv::Writer<W>,
    m: &MetricMatrix,
    models: &[ModelSpec],
) -> csv::Result<()> {
    let family: HashMap<&str, &str> = models.iter().map(|m| (m.id.as_str(), m.family.as_str())).collect();
    for qm in &m.qms {
        for am in &m.ams {
            if let Some(c) = m.cell(qm, am) {
                let top = m.top4.get(qm).is_some_and(|t| t.contains(am));
                w.write_record([
                    qm.as_str(),
                    am,
                    m.mode.as_str(),
                    &fmt_opt(c.kappa),
                    &c.alpha.to_string(),
                    &c.n_total.to_string(),
                    &c.n_answered.to_string(),
                    &c.n_correct.to_string(),
                    m.kind.as_str(),
                    &c.n_refused.to_string(),
                    &c.n_parse_error.to_string(),
                    &c.n_selected_e.to_string(),
                    if top { "1" } else { "0" },
                    family.get(qm.as_str()).copied().unwrap_or(""),
                ])?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(outcome: Outcome, correct: Label) -> Graded {
        Graded { outcome, correct }
    }

    #[test]
    fn worked_example() {
        use Label::*;
        let recs = [
            g(Outcome::Selected(A), A),
            g(Outcome::Refused, B),
            g(Outcome::Selected(B), B),
            g(Outcome::Selected(C), D),
        ];
        let c = compute_kappa_alpha("q", "a", Mode::Direct, &recs);
        assert_eq!(c.kappa, Some(2.0 / 3.0));
        assert_eq!(c.alpha, 0.75);
    }

    #[test]
    fn all_refused_leaves_kappa_undefined() {
        let recs = [g(Outcome::Refused, Label::A), g(Outcome::ParseError, Label::B)];
        let c = compute_kappa_alpha("q", "a", Mode::Direct, &recs);
        assert_eq!(c.kappa, None);
        assert_eq!(c.alpha, 0.0);
        assert_eq!((c.n_refused, c.n_parse_error), (1, 1));
    }

    #[test]
    fn selected_e_is_answered_but_wrong() {
        let recs = [g(Outcome::SelectedE, Label::A), g(Outcome::Selected(Label::A), Label::A)];
        let c = compute_kappa_alpha("q", "a", Mode::Direct, &recs);
        assert_eq!(c.kappa, Some(0.5));
        assert_eq!(c.alpha, 1.0);
    }

    fn rec(e: bool, outcome: Outcome) -> AnswerRecord {
        AnswerRecord {
            question_id: "q".into(),
            am_id: "a".into(),
            presentation: crate::domain::Presentation {
                question_id: "q".into(),
                permutation: crate::domain::Permutation::IDENTITY,
                shuffled: true,
                augmented_e: e,
                presented_text: String::new(),
            },
            raw_response: String::new(),
            outcome,
            latency_ms: 0,
        }
    }

    fn fict(v: FictionalityVerdict) -> FictionalityRecord {
        FictionalityRecord {
            question_id: "q".into(),
            am_id: "a".into(),
            topic: "t".into(),
            reply: String::new(),
            verdict: v,
        }
    }

    #[test]
    fn probe_rate_ratios() {
        let mut e: Vec<_> = (0..7).map(|_| rec(true, Outcome::Selected(Label::A))).collect();
        e.extend((0..3).map(|_| rec(true, Outcome::SelectedE)));
        assert_eq!(probe_rates(&e, &[]).e_selection_rate, Some(0.3));

        let yes: Vec<_> = (0..4).map(|_| fict(FictionalityVerdict::Yes)).collect();
        assert_eq!(probe_rates(&[], &yes).fictionality_detection_rate, Some(0.0));

        let mut mixed: Vec<_> = (0..6).map(|_| fict(FictionalityVerdict::No)).collect();
        mixed.extend((0..2).map(|_| fict(FictionalityVerdict::Yes)));
        mixed.extend((0..2).map(|_| fict(FictionalityVerdict::Unparseable)));
        let r = probe_rates(&[], &mixed);
        assert_eq!(r.fictionality_detection_rate, Some(6.0 / 8.0));
        assert_eq!(r.n_unparseable, 2);
    }

    fn matrix_with(kappa: &[(&str, &str, Option<f64>)]) -> MetricMatrix {
        let mut cells = BTreeMap::new();
        for (q, a, k) in kappa {
            cells.insert(
                (q.to_string(), a.to_string()),
                MetricCell {
                    qm_id: q.to_string(),
                    am_id: a.to_string(),
                    mode: Mode::Direct,
                    kappa: *k,
                    alpha: 1.0,
                    n_total: 1,
                    n_answered: 1,
                    n_correct: 0,
                    n_refused: 0,
                    n_parse_error: 0,
                    n_selected_e: 0,
                },
            );
        }
        MetricMatrix {
            mode: Mode::Direct,
            kind: PresentationKind::Shuffled,
            qms: vec![],
            ams: vec![],
            cells,
            row_avg: BTreeMap::new(),
            col_avg: BTreeMap::new(),
            overall: average([].iter()),
            top4: BTreeMap::new(),
            qm_blocks: vec![],
            am_blocks: vec![],
            missing: vec![],
        }
    }

    #[test]
    fn native_delta() {
        let s = matrix_with(&[("q", "a", Some(0.54))]);
        let n = matrix_with(&[("q", "a", Some(0.64))]);
        let d = native_order_delta(&s, &n).unwrap();
        assert!((d[0].d_kappa.unwrap() - 0.10).abs() < 1e-12);
        assert_eq!(d[0].d_alpha, 0.0);
        assert!(native_order_delta(&s, &s).unwrap().iter().all(|c| c.d_kappa == Some(0.0)));
        let other = matrix_with(&[("q", "b", Some(0.5))]);
        assert_eq!(native_order_delta(&s, &other), Err(MetricsError::SupportMismatch));
    }

    #[test]
    fn family_blocks_group_contiguous_runs() {
        let spec = |id: &str, fam: &str| ModelSpec {
            id: id.into(),
            endpoint_kind: crate::domain::EndpointKind::Chat,
            base_url: String::new(),
            model_name: id.into(),
            temperature: None,
            max_tokens: 1,
            role_tags: Default::default(),
            family: fam.into(),
            api_key_env: None,
            chat_template: Default::default(),
        };
        let models = [spec("a", "x"), spec("b", "x"), spec("c", "y")];
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let b = family_blocks(&ids, &models);
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].members, vec!["a", "b"]);
    }

    fn outcome() -> impl Strategy<Value = Outcome> {
        prop_oneof![
            (0usize..4).prop_map(|i| Outcome::Selected(Label::ALL[i])),
            Just(Outcome::SelectedE),
            Just(Outcome::Refused),
            Just(Outcome::ParseError),
        ]
    }

    proptest! {
        #[test]
        fn rates_are_bounded(recs in prop::collection::vec((outcome(), 0usize..4), 0..40)) {
            let graded: Vec<_> = recs.iter().map(|(o, c)| g(*o, Label::ALL[*c])).collect();
            let c = compute_kappa_alpha("q", "a", Mode::Direct, &graded);
            prop_assert!(c.n_correct <= c.n_answered && c.n_answered <= c.n_total);
            prop_assert!((0.0..=1.0).contains(&c.alpha));
            if let Some(k) = c.kappa {
                prop_assert!((0.0..=1.0).contains(&k));
            }
        }
    }
}
