//! Random formula trees within the parser's grammar, and malformed inputs.

use envguard::formula::{Atom, Formula, ServiceKind};
use proptest::prelude::*;

const RESERVED: [&str; 6] = ["G", "F", "true", "false", "event", "action"];

fn ident() -> impl Strategy<Value = String> {
    "[A-Za-z_][A-Za-z0-9_]{0,6}".prop_filter("reserved word", |s| !RESERVED.contains(&s.as_str()))
}

fn value() -> impl Strategy<Value = String> {
    prop_oneof![ident(), (0u32..1000).prop_map(|n| n.to_string())]
}

fn atom() -> impl Strategy<Value = Formula> {
    prop_oneof![
        4 => (prop::collection::vec(ident(), 1..4), prop::option::of(value()))
            .prop_map(|(segments, value)| Formula::Atom(Atom::Path { segments, value })),
        1 => (any::<bool>(), ident(), ident()).prop_map(|(ev, location, service)| {
            Formula::Atom(Atom::Occurs {
                kind: if ev { ServiceKind::Event } else { ServiceKind::Action },
                service,
                location,
            })
        }),
        1 => Just(Formula::True),
        1 => Just(Formula::False),
    ]
}

pub fn formula() -> impl Strategy<Value = Formula> {
    atom().prop_recursive(5, 48, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(Formula::not),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Formula::and(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Formula::or(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Formula::implies(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Formula::iff(a, b)),
            inner.clone().prop_map(Formula::always),
            inner.clone().prop_map(Formula::eventually),
            (0u64..100, 0u64..10_000, inner.clone()).prop_map(|(lo, d, b)| Formula::AlwaysWithin {
                lo,
                hi: lo + d,
                body: Box::new(b)
            }),
            (0u64..100, 0u64..10_000, inner).prop_map(|(lo, d, b)| Formula::EventuallyWithin {
                lo,
                hi: lo + d,
                body: Box::new(b)
            }),
        ]
    })
}

/// Inputs that must be rejected with a position.
pub const MALFORMED: &[&str] = &[
    "",
    "G(",
    "G(p ->)",
    "p &",
    "& p",
    "(p",
    "p)",
    "G[0,30 p",
    "F[30,0] p",
    "F[a,3] p",
    "F[0,30x] p",
    "F[0 30] p",
    "p = ",
    "p == == q",
    "Lab..Human",
    "Lab.Human.",
    "action(Lab)",
    "action(Lab.Window_Open",
    "event()",
    "p # q",
    "p -> -> q",
    "!",
    "G",
    "G[0,99999999999999999999999] p",
    "p <- q",
    "p q",
    "()",
    "p\n& (q\n|",
    "¬¬",
    "1abc",
];
