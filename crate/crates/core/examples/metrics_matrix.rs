//! Correctness and answering rates for a small QM x AM grid built from
//! graded outcomes.
//!
//! cargo run --example metrics_matrix

use iqa::domain::{Label, Mode, Outcome};
use iqa::metrics::{compute_kappa_alpha, fmt_opt, Graded};

fn graded(script: &str) -> Vec<Graded> {
    script
        .chars()
        .map(|c| Graded {
            outcome: match c {
                'C' => Outcome::Selected(Label::A),
                'W' => Outcome::Selected(Label::B),
                'E' => Outcome::SelectedE,
                'R' => Outcome::Refused,
                _ => Outcome::ParseError,
            },
            correct: Label::A,
        })
        .collect()
}

fn main() {
    // C correct, W wrong, E chose "cannot be answered", R refused, P unparseable.
    let grid = [("m1", "m1", "CCCCW"), ("m1", "m2", "CCWRR"), ("m2", "m1", "CWWEP"), ("m2", "m2", "RRRRR")];
    println!("{:<8} {:<8} {:>6} {:>6} {:>4}", "qm", "am", "kappa", "alpha", "n");
    for (qm, am, script) in grid {
        let c = compute_kappa_alpha(qm, am, Mode::Direct, &graded(script));
        let kappa = fmt_opt(c.kappa.map(|k| (k * 1000.0).round() / 1000.0));
        println!("{qm:<8} {am:<8} {kappa:>6} {:>6} {:>4}", c.alpha, c.n_total);
    }
}
