//! Hand-written truth tables for the sixteen template rows.

use std::collections::BTreeMap;

use envguard::formula::{Atom, Formula};
use envguard::mtl::TimerMode;
use envguard::property::{self, Polarity, TemplateArgs};

pub type Valuation = BTreeMap<&'static str, bool>;

const NAMES: [&str; 7] = ["e1", "e2", "e3", "s1", "s2", "s3", "o"];

fn atom(name: &str) -> Formula {
    Formula::Atom(Atom::Path {
        segments: vec![name.to_string()],
        value: None,
    })
}

fn holds(f: &Formula, v: &Valuation) -> bool {
    match f {
        Formula::True => true,
        Formula::False => false,
        Formula::Atom(Atom::Path { segments, .. }) => v[segments[0].as_str()],
        Formula::Not(a) => !holds(a, v),
        Formula::And(a, b) => holds(a, v) && holds(b, v),
        Formula::Or(a, b) => holds(a, v) || holds(b, v),
        Formula::Implies(a, b) => !holds(a, v) || holds(b, v),
        Formula::Iff(a, b) => holds(a, v) == holds(b, v),
        other => panic!("not propositional: {other}"),
    }
}

pub enum Expected {
    /// `G(core)`.
    Invariant(fn(&Valuation) -> bool),
    /// `G(trigger -> X[0,t] body)`.
    Timed(fn(&Valuation) -> bool, TimerMode, fn(&Valuation) -> bool),
}

pub struct Row {
    pub template: u8,
    pub polarity: Polarity,
    pub effects: usize,
    pub states: usize,
    pub occurrence: bool,
    pub expected: Expected,
}

fn s(v: &Valuation) -> bool {
    v["s1"] && v["s2"]
}

pub fn rows() -> Vec<Row> {
    use Expected::*;
    use Polarity::*;
    use TimerMode::{F, G};
    let row = |template, polarity, effects, states, occurrence, expected| Row {
        template,
        polarity,
        effects,
        states,
        occurrence,
        expected,
    };
    vec![
        row(
            1,
            Always,
            3,
            0,
            false,
            Invariant(|v| v["e1"] == v["e2"] && v["e2"] == v["e3"]),
        ),
        row(1, Never, 3, 0, false, Invariant(|v| !(v["e1"] && v["e2"] && v["e3"]))),
        row(2, Always, 1, 2, false, Invariant(|v| !s(v) || v["e1"])),
        row(2, Never, 1, 2, false, Invariant(|v| !s(v) || !v["e1"])),
        row(
            3,
            Always,
            0,
            3,
            false,
            Invariant(|v| v["s1"] == v["s2"] && v["s2"] == v["s3"]),
        ),
        row(3, Never, 0, 2, false, Invariant(|v| !s(v))),
        row(4, Only, 0, 2, true, Invariant(|v| !v["o"] || s(v))),
        row(4, Never, 0, 2, true, Invariant(|v| !v["o"] || !s(v))),
        row(5, More, 1, 0, false, Timed(|v| v["e1"], G, |v| v["e1"])),
        row(5, Less, 1, 0, false, Timed(|v| v["e1"], F, |v| !v["e1"])),
        row(6, Always, 1, 2, false, Timed(s, F, |v| v["e1"])),
        row(6, Never, 1, 2, false, Timed(s, G, |v| !v["e1"])),
        row(7, Always, 0, 2, true, Timed(|v| v["o"], F, s)),
        row(7, Never, 0, 2, true, Timed(|v| v["o"], G, |v| !s(v))),
        row(8, More, 0, 2, false, Timed(s, G, s)),
        row(8, Less, 0, 2, false, Timed(s, F, |v| !s(v))),
    ]
}

fn valuations() -> impl Iterator<Item = Valuation> {
    (0u32..1 << NAMES.len()).map(|bits| {
        NAMES
            .iter()
            .enumerate()
            .map(|(i, n)| (*n, bits >> i & 1 == 1))
            .collect()
    })
}

/// Instantiates one row with symbolic atoms and compares it with the table
/// on every valuation.
pub fn check(row: &Row) -> Result<(), String> {
    let args = TemplateArgs {
        effects: ["e1", "e2", "e3"][..row.effects].iter().map(|n| atom(n)).collect(),
        states: ["s1", "s2", "s3"][..row.states].iter().map(|n| atom(n)).collect(),
        occurrence: row.occurrence.then(|| atom("o")),
        time: (row.template >= 5).then_some(30),
    };
    let name = format!("template {} {:?}", row.template, row.polarity);
    let f = property::template_formula(row.template, row.polarity, &args).map_err(|e| format!("{name}: {e}"))?;
    let Formula::Always(body) = &f else {
        return Err(format!("{name}: not an invariant: {f}"));
    };
    match (&row.expected, body.as_ref()) {
        (Expected::Invariant(oracle), core) => {
            for v in valuations() {
                if holds(core, &v) != oracle(&v) {
                    return Err(format!("{name}: disagrees at {v:?}"));
                }
            }
        }
        (Expected::Timed(trigger, mode, cond), Formula::Implies(t, timed)) => {
            let (m, lo, hi, b) = match timed.as_ref() {
                Formula::AlwaysWithin { lo, hi, body } => (TimerMode::G, lo, hi, body),
                Formula::EventuallyWithin { lo, hi, body } => (TimerMode::F, lo, hi, body),
                other => return Err(format!("{name}: not a bounded operator: {other}")),
            };
            if m != *mode || (*lo, *hi) != (0, 30) {
                return Err(format!("{name}: wrong timer {m:?}[{lo},{hi}]"));
            }
            for v in valuations() {
                if holds(t, &v) != trigger(&v) || holds(b, &v) != cond(&v) {
                    return Err(format!("{name}: disagrees at {v:?}"));
                }
            }
        }
        (_, other) => return Err(format!("{name}: unexpected shape {other}")),
    }
    Ok(())
}
