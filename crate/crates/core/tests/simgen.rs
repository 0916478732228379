mod common;

use std::collections::{BTreeMap, BTreeSet};

use envguard::checker::AnalysisRecord;
use envguard::model::EnvironmentGraph;
use envguard::runtime::{Engine, MessageKind};
use envguard::simgen::{self, Injection, LabeledTrace, Scenario, SimError};

fn scenario(g: &EnvironmentGraph, records: &[AnalysisRecord], seed: u64, days: u64, per_day: f64) -> Scenario {
    let mut s = Scenario::uniform(g, seed, days, per_day);
    s.injections = records
        .iter()
        .map(|r| Injection {
            property: r.property_id,
            count: 1,
        })
        .collect();
    s
}

fn background(t: &LabeledTrace) -> usize {
    t.messages.iter().filter(|m| m.kind != MessageKind::Tick).count()
}

/// Violations reported by a fresh engine, keyed by message index.
fn engine_verdicts(
    g: &EnvironmentGraph,
    records: &[AnalysisRecord],
    t: &LabeledTrace,
) -> BTreeMap<usize, BTreeSet<u32>> {
    let mut e = Engine::new(g.clone(), records).unwrap();
    e.set_timing(false);
    let mut out = BTreeMap::new();
    for (i, m) in t.messages.iter().enumerate() {
        let ids: BTreeSet<u32> = e
            .ingest(m)
            .unwrap()
            .violations()
            .filter_map(|v| v.property_id)
            .collect();
        if !ids.is_empty() {
            out.insert(i, ids);
        }
    }
    out
}

#[test]
fn same_seed_same_bytes() {
    let (g, records) = common::analysed("office");
    let a = simgen::generate_trace(&g, &records, &scenario(&g, &records, 7, 1, 200.0)).unwrap();
    let b = simgen::generate_trace(&g, &records, &scenario(&g, &records, 7, 1, 200.0)).unwrap();
    assert_eq!(a.trace_text(), b.trace_text());
    assert_eq!(a.labels_text(), b.labels_text());
    let c = simgen::generate_trace(&g, &records, &scenario(&g, &records, 8, 1, 200.0)).unwrap();
    assert_ne!(a.trace_text(), c.trace_text());
}

#[test]
fn timestamps_strictly_increase() {
    let (g, records) = common::analysed("home");
    let t = simgen::generate_trace(&g, &records, &scenario(&g, &records, 3, 2, 300.0)).unwrap();
    assert!(t.messages.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
    assert!(t.messages.last().unwrap().timestamp <= t.header.duration * 1000 + 3_600_000);
}

#[test]
fn traffic_scales_with_rate() {
    let (g, records) = common::analysed("office");
    let days = 3;
    let low = simgen::generate_trace(&g, &records, &Scenario::uniform(&g, 11, days, 100.0)).unwrap();
    let high = simgen::generate_trace(&g, &records, &Scenario::uniform(&g, 11, days, 400.0)).unwrap();
    let (n_low, n_high) = (background(&low) as f64, background(&high) as f64);
    // Poisson counts: mean 300 and 1200, five standard deviations either side.
    assert!((n_low - 300.0).abs() < 5.0 * 300f64.sqrt(), "{n_low}");
    assert!((n_high - 1200.0).abs() < 5.0 * 1200f64.sqrt(), "{n_high}");
}

#[test]
fn every_injected_property_is_labeled() {
    for name in ["mini_lab", "office", "home"] {
        let (g, records) = common::analysed(name);
        let t = simgen::generate_trace(&g, &records, &scenario(&g, &records, 1, 1, 200.0)).unwrap();
        let seen: BTreeSet<u32> = t.labels.values().flatten().copied().collect();
        for r in &records {
            assert!(
                seen.contains(&r.property_id),
                "{name}: property {} never violated",
                r.property_id
            );
        }
    }
}

#[test]
fn labels_match_engine_and_fold() {
    for name in ["office", "home"] {
        let (g, records) = common::analysed(name);
        for seed in 0..3 {
            let t = simgen::generate_trace(&g, &records, &scenario(&g, &records, seed, 1, 200.0)).unwrap();
            assert_eq!(engine_verdicts(&g, &records, &t), t.labels, "{name} seed {seed}");
            let agreement = simgen::verify_labels(&g, &records, &t);
            assert!(agreement.agrees(), "{name} seed {seed}: {:?}", agreement.disagreements);
            assert_eq!(agreement.labeled, agreement.oracle);
        }
    }
}

#[test]
fn tampered_labels_are_caught() {
    let (g, records) = common::analysed("office");
    let mut t = simgen::generate_trace(&g, &records, &scenario(&g, &records, 5, 1, 200.0)).unwrap();
    let first = *t.labels.keys().next().unwrap();
    t.labels.remove(&first);
    let agreement = simgen::verify_labels(&g, &records, &t);
    assert!(!agreement.agrees());
    assert_eq!(agreement.disagreements[0].index, first);
}

#[test]
fn texts_round_trip() {
    let (g, records) = common::analysed("mini_lab");
    let t = simgen::generate_trace(&g, &records, &scenario(&g, &records, 2, 1, 100.0)).unwrap();
    let back = LabeledTrace::from_texts(&t.trace_text(), &t.labels_text()).unwrap();
    assert_eq!(back, t);
    assert!(LabeledTrace::from_texts("", &t.labels_text()).is_err());
}

#[test]
fn invalid_scenarios_are_rejected() {
    let (g, records) = common::analysed("mini_lab");
    let mut s = Scenario::uniform(&g, 0, 1, 100.0);
    s.injections.push(Injection { property: 99, count: 1 });
    assert!(matches!(
        simgen::generate_trace(&g, &records, &s),
        Err(SimError::InvalidScenario(_))
    ));

    let mut s = Scenario::uniform(&g, 0, 1, 100.0);
    s.rates[0].mean_interval = 0.0;
    assert!(matches!(
        simgen::generate_trace(&g, &records, &s),
        Err(SimError::InvalidScenario(_))
    ));

    let mut s = Scenario::uniform(&g, 0, 1, 100.0);
    s.rates[0].service = "Nothing_Here".into();
    assert!(matches!(
        simgen::generate_trace(&g, &records, &s),
        Err(SimError::InvalidScenario(_))
    ));

    let mut s = Scenario::uniform(&g, 0, 1, 100.0);
    s.user_share = 1.5;
    assert!(simgen::generate_trace(&g, &records, &s).is_err());
}
