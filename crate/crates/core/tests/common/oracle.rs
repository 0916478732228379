//! Brute-force reference for the offline analysis: enumerate every
//! assignment of the relevant states, apply services directly to the
//! description data, and read the tables off the full relation.

use std::collections::{BTreeMap, BTreeSet};

use envguard::checker::{AnalysisRecord, Label};
use envguard::formula::{Atom, Formula, ServiceKind};
use envguard::model::{CmpOp, CondTarget, EffectKind, EnvironmentGraph, PreConditionSpec, StateRef};
use envguard::property::{Property, PropertyKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub type Assignment = BTreeMap<StateRef, usize>;

#[derive(Debug, Default, PartialEq, Eq)]
pub struct Reference {
    pub dims: BTreeSet<StateRef>,
    pub nodes: BTreeSet<Assignment>,
    pub edges: BTreeSet<(Assignment, Label, Assignment)>,
    pub accepting: BTreeSet<Assignment>,
    pub risk: BTreeMap<Assignment, BTreeSet<Label>>,
    pub resolutions: BTreeMap<Assignment, Vec<Label>>,
}

fn providers(graph: &EnvironmentGraph, service: &str, location: &str) -> Vec<StateRef> {
    graph
        .actions
        .iter()
        .filter(|a| a.action_type == service && a.location == location)
        .flat_map(|a| a.urls.keys().map(|d| StateRef::device(d, &a.device_state)))
        .collect()
}

/// Relevant states: the formula's own states, occurrence targets, and
/// everything that can change a space state already included.
pub fn closure(formula: &Formula, graph: &EnvironmentGraph) -> BTreeSet<StateRef> {
    let mut out = BTreeSet::new();
    let mut todo = Vec::new();
    for atom in formula.atoms() {
        match atom {
            Atom::State { state, .. } => todo.push(state.clone()),
            Atom::Occurs {
                kind: ServiceKind::Action,
                service,
                location,
            } => todo.extend(providers(graph, service, location)),
            Atom::Occurs {
                kind: ServiceKind::Event,
                service,
                location,
            } => {
                for e in graph
                    .events
                    .iter()
                    .filter(|e| &e.event_type == service && &e.location == location)
                {
                    todo.push(StateRef::space(&e.location, &e.target_state));
                }
            }
            Atom::Path { .. } => panic!("unresolved path in analysed formula"),
        }
    }
    while let Some(r) = todo.pop() {
        if !out.insert(r.clone()) {
            continue;
        }
        for a in &graph.actions {
            for e in a
                .effects
                .iter()
                .filter(|e| e.affected_space == r.owner && e.state_name == r.name)
            {
                if r.scope != envguard::model::Scope::Space {
                    continue;
                }
                todo.extend(a.urls.keys().map(|d| StateRef::device(d, &a.device_state)));
                if let Some(p) = &e.precondition {
                    todo.push(p.state.clone());
                    if let CondTarget::ReferTo(o) = &p.target {
                        todo.push(o.clone());
                    }
                }
            }
        }
    }
    out
}

fn domain(graph: &EnvironmentGraph, r: &StateRef) -> Vec<String> {
    graph.slot(r).expect("known state").domain.clone()
}

fn pre_holds(graph: &EnvironmentGraph, pre: &PreConditionSpec, a: &Assignment) -> bool {
    let Some(&lhs) = a.get(&pre.state) else { return false };
    let rhs_symbol = match &pre.target {
        CondTarget::Value(v) => v.clone(),
        CondTarget::ReferTo(o) => match a.get(o) {
            Some(&i) => domain(graph, o)[i].clone(),
            None => return false,
        },
    };
    match domain(graph, &pre.state).iter().position(|v| *v == rhs_symbol) {
        None => pre.operator == CmpOp::Neq,
        Some(rhs) => match pre.operator {
            CmpOp::Eq => lhs == rhs,
            CmpOp::Neq => lhs != rhs,
            CmpOp::Lt => lhs < rhs,
            CmpOp::Gt => lhs > rhs,
            CmpOp::Leq => lhs <= rhs,
            CmpOp::Geq => lhs >= rhs,
        },
    }
}

fn successors(graph: &EnvironmentGraph, a: &Assignment) -> Vec<(Label, Assignment)> {
    let mut out = Vec::new();
    for e in &graph.events {
        let target = StateRef::space(&e.location, &e.target_state);
        let Some(&cur) = a.get(&target) else { continue };
        for (i, v) in domain(graph, &target).iter().enumerate() {
            if i != cur {
                let mut b = a.clone();
                b.insert(target.clone(), i);
                out.push((
                    Label::Event {
                        event_type: e.event_type.clone(),
                        location: e.location.clone(),
                        payload: v.clone(),
                    },
                    b,
                ));
            }
        }
    }
    for act in &graph.actions {
        let mut b = a.clone();
        for d in act.urls.keys() {
            let r = StateRef::device(d, &act.device_state);
            if b.contains_key(&r) {
                let i = domain(graph, &r)
                    .iter()
                    .position(|v| *v == act.post_value)
                    .expect("post value");
                b.insert(r, i);
            }
        }
        for e in &act.effects {
            let target = StateRef::space(&e.affected_space, &e.state_name);
            let Some(&cur) = a.get(&target) else { continue };
            if let Some(p) = &e.precondition {
                if !pre_holds(graph, p, a) {
                    continue;
                }
            }
            let n = domain(graph, &target).len();
            let next = match &e.effect {
                EffectKind::Set { value } => match domain(graph, &target).iter().position(|v| v == value) {
                    Some(i) => i,
                    None => continue,
                },
                EffectKind::Increase => (cur + 1).min(n - 1),
                EffectKind::Decrease => cur.saturating_sub(1),
            };
            b.insert(target, next);
        }
        if &b != a {
            out.push((
                Label::Action {
                    action_type: act.action_type.clone(),
                    location: act.location.clone(),
                },
                b,
            ));
        }
    }
    out
}

/// `occ`: the label of the step being judged, for edge predicates.
fn eval(graph: &EnvironmentGraph, f: &Formula, a: &Assignment, occ: Option<&Label>) -> bool {
    let ev = |g: &Formula| eval(graph, g, a, occ);
    match f {
        Formula::True => true,
        Formula::False => false,
        Formula::Atom(Atom::State { state, value }) => a.get(state).is_some_and(|&i| domain(graph, state)[i] == *value),
        Formula::Atom(Atom::Occurs {
            kind,
            service,
            location,
        }) => match occ {
            Some(l) => match (kind, l) {
                (
                    ServiceKind::Action,
                    Label::Action {
                        action_type,
                        location: loc,
                    },
                ) => action_type == service && loc == location,
                (
                    ServiceKind::Event,
                    Label::Event {
                        event_type,
                        location: loc,
                        ..
                    },
                ) => event_type == service && loc == location,
                _ => false,
            },
            None => match kind {
                ServiceKind::Event => false,
                ServiceKind::Action => {
                    let post = graph
                        .actions
                        .iter()
                        .find(|x| &x.action_type == service && &x.location == location)
                        .map(|x| x.post_value.clone())
                        .expect("action exists");
                    providers(graph, service, location)
                        .iter()
                        .any(|r| a.get(r).is_some_and(|&i| domain(graph, r)[i] == post))
                }
            },
        },
        Formula::Atom(Atom::Path { .. }) => panic!("unresolved path"),
        Formula::Not(x) => !ev(x),
        Formula::And(x, y) => ev(x) && ev(y),
        Formula::Or(x, y) => ev(x) || ev(y),
        Formula::Implies(x, y) => !ev(x) || ev(y),
        Formula::Iff(x, y) => ev(x) == ev(y),
        other => panic!("temporal operator inside a state predicate: {other:?}"),
    }
}

fn has_occurrence(f: &Formula) -> bool {
    f.atoms().iter().any(|a| matches!(a, Atom::Occurs { .. }))
}

/// The violating-state predicate and the formula whose states matter.
fn target(prop: &Property) -> (Formula, Formula) {
    let Formula::Always(body) = &prop.formula else {
        panic!("property is not an invariant: {}", prop.formula)
    };
    match prop.kind {
        PropertyKind::Spatial => {
            let chi = Formula::not((**body).clone());
            (chi.clone(), chi)
        }
        PropertyKind::Temporal => {
            let Formula::Implies(trigger, timed) = body.as_ref() else {
                panic!("unexpected temporal shape")
            };
            let cond = match timed.as_ref() {
                Formula::AlwaysWithin { body, .. } | Formula::EventuallyWithin { body, .. } => (**body).clone(),
                _ => panic!("unexpected temporal shape"),
            };
            (Formula::not(cond.clone()), Formula::and((**trigger).clone(), cond))
        }
    }
}

/// Full enumeration; `None` when the product of the domains exceeds `limit`.
pub fn reference(prop: &Property, graph: &EnvironmentGraph, limit: usize) -> Option<Reference> {
    let (chi, scope) = target(prop);
    let dims = closure(&scope, graph);
    let refs: Vec<StateRef> = dims.iter().cloned().collect();
    let sizes: Vec<usize> = refs.iter().map(|r| domain(graph, r).len()).collect();
    let total: usize = sizes.iter().product();
    if total > limit {
        return None;
    }
    let mut all = Vec::with_capacity(total);
    for mut k in 0..total {
        let mut a = Assignment::new();
        for (r, n) in refs.iter().zip(&sizes) {
            a.insert(r.clone(), k % n);
            k /= n;
        }
        all.push(a);
    }
    let relation: Vec<Vec<(Label, Assignment)>> = all.iter().map(|a| successors(graph, a)).collect();
    let initial: Assignment = refs
        .iter()
        .map(|r| {
            let slot = graph.slot(r).expect("slot");
            (r.clone(), slot.index_of(&slot.current).expect("current in domain"))
        })
        .collect();
    let mut reach = BTreeSet::from([initial]);
    loop {
        let before = reach.len();
        for (a, succ) in all.iter().zip(&relation) {
            if reach.contains(a) {
                for (_, b) in succ {
                    reach.insert(b.clone());
                }
            }
        }
        if reach.len() == before {
            break;
        }
    }
    let mut out = Reference {
        dims,
        ..Default::default()
    };
    let occurs = has_occurrence(&chi);
    let accepting = |a: &Assignment| eval(graph, &chi, a, None);
    let edge_accepting = |a: &Assignment, l: &Label| {
        occurs && {
            let matches = chi.atoms().iter().any(|atom| match (atom, l) {
                (
                    Atom::Occurs {
                        kind: ServiceKind::Action,
                        service,
                        location,
                    },
                    Label::Action {
                        action_type,
                        location: loc,
                    },
                ) => service == action_type && location == loc,
                (
                    Atom::Occurs {
                        kind: ServiceKind::Event,
                        service,
                        location,
                    },
                    Label::Event {
                        event_type,
                        location: loc,
                        ..
                    },
                ) => service == event_type && location == loc,
                _ => false,
            });
            matches && eval(graph, &chi, a, Some(l))
        }
    };
    for (a, succ) in all.iter().zip(&relation) {
        if !reach.contains(a) {
            continue;
        }
        out.nodes.insert(a.clone());
        let acc = accepting(a);
        if acc {
            out.accepting.insert(a.clone());
            out.resolutions.insert(a.clone(), Vec::new());
        }
        let mut best: BTreeMap<Label, usize> = BTreeMap::new();
        for (l, b) in succ {
            out.edges.insert((a.clone(), l.clone(), b.clone()));
            let edge_acc = edge_accepting(a, l);
            if !acc && (accepting(b) || edge_acc) {
                out.risk.entry(a.clone()).or_default().insert(l.clone());
            }
            if acc && !accepting(b) && !edge_acc && matches!(l, Label::Action { .. }) {
                let changed = a.iter().filter(|(r, v)| b[*r] != **v).count();
                let e = best.entry(l.clone()).or_insert(changed);
                *e = (*e).min(changed);
            }
        }
        if acc {
            let mut v: Vec<(usize, String, String, Label)> = best
                .into_iter()
                .map(|(l, c)| match &l {
                    Label::Action { action_type, location } => (c, action_type.clone(), location.clone(), l.clone()),
                    Label::Event { .. } => unreachable!(),
                })
                .collect();
            v.sort();
            out.resolutions.insert(a.clone(), v.into_iter().map(|x| x.3).collect());
        }
    }
    Some(out)
}

/// Converts a value vector from an analysis record to an assignment.
pub fn assignment(record: &AnalysisRecord, values: &[String]) -> Assignment {
    record
        .dims
        .iter()
        .zip(values)
        .map(|(d, v)| {
            (
                d.state.clone(),
                d.domain.iter().position(|x| x == v).expect("value in domain"),
            )
        })
        .collect()
}

/// A small random environment as description JSON, plus a property file.
pub struct RandomFixture {
    pub spaces: Value,
    pub devices: Vec<Value>,
    pub properties: Value,
}

const VALUES: [&str; 3] = ["v0", "v1", "v2"];
const STATES: [&str; 3] = ["a", "b", "c"];

pub fn random_fixture(seed: u64) -> RandomFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_spaces = rng.random_range(1..=2);
    let mut space_states: Vec<(String, String, usize)> = Vec::new();
    let mut spaces = Vec::new();
    for s in 0..n_spaces {
        let id = format!("S{s}");
        let mut states = serde_json::Map::new();
        for name in STATES.iter().take(rng.random_range(1..=2)) {
            let n = rng.random_range(2..=3);
            let init = rng.random_range(0..n);
            states.insert(
                name.to_string(),
                json!({"domain": VALUES[..n], "ordered": true, "initial": VALUES[init]}),
            );
            space_states.push((id.clone(), name.to_string(), n));
        }
        spaces.push(json!({"id": id, "type": "room", "states": states}));
    }
    let pick_state = |rng: &mut ChaCha8Rng| space_states[rng.random_range(0..space_states.len())].clone();

    let n_devices = rng.random_range(2..=3);
    let mut devices = Vec::new();
    let mut effect_names = BTreeSet::new();
    let mut device_states = Vec::new();
    let mut occurrences = Vec::new();
    for d in 0..n_devices {
        let id = format!("D{d}");
        let location = format!("S{}", rng.random_range(0..n_spaces));
        let mut effects = |rng: &mut ChaCha8Rng, max: usize| -> Vec<Value> {
            (0..rng.random_range(0..=max))
                .map(|_| {
                    let (space, state, n) = pick_state(rng);
                    let mut e = json!({"state_name": state, "affected_space": space});
                    match rng.random_range(0..3) {
                        0 => {
                            e["effect_type"] = json!("increase");
                            effect_names.insert(format!("{space}.{state}_Up"));
                        }
                        1 => {
                            e["effect_type"] = json!("decrease");
                            effect_names.insert(format!("{space}.{state}_Down"));
                        }
                        _ => {
                            let v = VALUES[rng.random_range(0..n)];
                            e["effect_type"] = json!("set");
                            e["value"] = json!(v);
                            effect_names.insert(format!("{space}.{state}_{v}"));
                        }
                    }
                    if rng.random_bool(0.4) {
                        let (ps, pn, pd) = pick_state(rng);
                        let op = ["eq", "neq", "lt", "gt", "leq", "geq"][rng.random_range(0..6)];
                        let mut pre = json!({"state": format!("{ps}.{pn}"), "operator": op});
                        if rng.random_bool(0.3) {
                            let (rs, rn, _) = pick_state(rng);
                            if (rs.as_str(), rn.as_str()) != (ps.as_str(), pn.as_str()) {
                                pre["refer_to"] = json!(format!("{rs}.{rn}"));
                            } else {
                                pre["value"] = json!(VALUES[rng.random_range(0..pd)]);
                            }
                        } else {
                            pre["value"] = json!(VALUES[rng.random_range(0..pd)]);
                        }
                        e["precondition"] = pre;
                    }
                    e
                })
                .collect()
        };
        let on_effects = effects(&mut rng, 2);
        let off_effects = effects(&mut rng, 1);
        let on = format!("K{d}_On");
        let off = format!("K{d}_Off");
        occurrences.push(format!("action({location}.{on})"));
        device_states.push(format!("{id}.power"));
        let initial = ["off", "on"][rng.random_range(0..2)];
        let dev = json!({
            "meta": {"id": id, "type": format!("k{d}"), "location": location},
            "device_state": {"power": {"domain": ["off", "on"], "initial": initial}},
            "event_services": [],
            "action_services": [
                {"action_type": on, "state": "power", "value": "on", "url": format!("http://{id}/on"), "inverse": off, "effects": on_effects},
                {"action_type": off, "state": "power", "value": "off", "url": format!("http://{id}/off"), "inverse": on, "effects": off_effects},
            ],
        });
        // A twin device sharing the services, merged into one instance.
        if d == 0 && rng.random_bool(0.5) {
            let mut twin = dev.clone();
            twin["meta"]["id"] = json!("D0twin");
            twin["device_state"] = json!({"power": {"domain": ["off", "on"], "initial": "off"}});
            for a in twin["action_services"].as_array_mut().expect("array") {
                a["url"] = json!(format!("http://D0twin/{}", a["value"].as_str().expect("value")));
            }
            devices.push(twin);
        }
        devices.push(dev);
    }
    for (space, state, _) in &space_states {
        if rng.random_bool(0.6) {
            let id = format!("Sensor_{space}_{state}");
            devices.push(json!({
                "meta": {"id": id, "type": "sensor", "location": space},
                "device_state": {},
                "event_services": [{"event_type": format!("{state}_Change"), "target_state": state, "topic": format!("t/{id}")}],
                "action_services": [],
            }));
            occurrences.push(format!("event({space}.{state}_Change)"));
        }
    }

    let mut state_atoms: Vec<String> = space_states
        .iter()
        .map(|(s, n, d)| format!("{s}.{n}={}", VALUES[rng.random_range(0..*d)]))
        .collect();
    state_atoms.extend(
        device_states
            .iter()
            .map(|d| format!("{d}={}", ["off", "on"][rng.random_range(0..2)])),
    );
    let effect_names: Vec<String> = effect_names.into_iter().collect();

    let mut properties = Vec::new();
    for id in 1..=4u32 {
        let template: u8 = rng.random_range(1..=8);
        let polarity = match template {
            1 | 2 | 3 | 6 | 7 => ["always", "never"][rng.random_range(0..2)],
            4 => ["only", "never"][rng.random_range(0..2)],
            _ => ["more", "less"][rng.random_range(0..2)],
        };
        let mut choose = |items: &[String], n: usize| -> Vec<String> {
            (0..n)
                .filter_map(|_| items.get(rng.random_range(0..items.len().max(1))).cloned())
                .collect()
        };
        let (ne, ns, occ) = match template {
            1 => (2, 0, false),
            2 => (1, 1, false),
            3 => (0, 2, false),
            4 => (0, 1, true),
            5 => (1, 0, false),
            6 => (1, 1, false),
            7 => (0, 1, true),
            _ => (0, 1, false),
        };
        let effects = choose(&effect_names, ne);
        let states = choose(&state_atoms, ns);
        let occurrence = if occ { choose(&occurrences, 1).pop() } else { None };
        let mut p = json!({
            "id": id,
            "template": template,
            "polarity": polarity,
            "bindings": {"effects": effects, "states": states},
            "strategy": "intercept_or_revoke",
        });
        if let Some(o) = occurrence {
            p["bindings"]["occurrence"] = json!(o);
        }
        if template >= 5 {
            p["time"] = json!(30);
        }
        properties.push(p);
    }
    RandomFixture {
        spaces: Value::Array(spaces),
        devices,
        properties: Value::Array(properties),
    }
}

/// Builds the random fixture for `seed` and compares every property that
/// compiles and fits in `limit` states against the library. Returns the
/// number of properties compared, or the first mismatch.
pub fn compare_seed(seed: u64, limit: usize) -> Result<usize, String> {
    use envguard::{checker, ingest, property};
    let fx = random_fixture(seed);
    let spaces = ingest::parse_space_descriptions(&fx.spaces.to_string()).map_err(|e| e.to_string())?;
    let devices = fx
        .devices
        .iter()
        .map(|d| ingest::parse_device_description(&d.to_string()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let Ok(graph) = ingest::build_representation(&spaces, &devices) else {
        return Ok(0);
    };
    let records = property::parse_property_file(&fx.properties.to_string()).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for rec in &records {
        let Ok(prop) = property::compile_record(rec, &graph) else {
            continue;
        };
        let Some(expected) = reference(&prop, &graph, limit) else {
            continue;
        };
        let record = checker::analyze_property(&prop, &graph, &BTreeSet::new(), 1_000_000)
            .map_err(|e| format!("seed {seed} property {}: {e}", prop.id))?;
        let env = checker::build_env_automaton(record.state_dims(), &graph, 1_000_000).map_err(|e| e.to_string())?;
        let fail = |what: &str| format!("seed {seed} property {} ({}): {what} differ", prop.id, prop.formula);
        let dims: BTreeSet<StateRef> = record.dims.iter().map(|d| d.state.clone()).collect();
        if dims != expected.dims {
            return Err(fail("dimensions"));
        }
        let nodes: BTreeSet<Assignment> = env
            .nodes
            .iter()
            .map(|n| assignment(&record, &record.state_dims().values(n)))
            .collect();
        if nodes != expected.nodes || record.node_count != expected.nodes.len() {
            return Err(fail("nodes"));
        }
        let edges: BTreeSet<(Assignment, Label, Assignment)> = env
            .edges
            .iter()
            .map(|(s, t, d)| {
                let dims = record.state_dims();
                (
                    assignment(&record, &dims.values(&env.nodes[*s])),
                    t.label.clone(),
                    assignment(&record, &dims.values(&env.nodes[*d])),
                )
            })
            .collect();
        if edges != expected.edges || record.edge_count != env.edges.len() {
            return Err(fail("edges"));
        }
        let accepting: BTreeSet<Assignment> = record.violated_states.iter().map(|s| assignment(&record, s)).collect();
        if accepting != expected.accepting {
            return Err(fail("accepting sets"));
        }
        let risk: BTreeMap<Assignment, BTreeSet<Label>> = record
            .violation_trans
            .iter()
            .map(|r| {
                (
                    assignment(&record, &r.state),
                    r.transitions.iter().map(|t| t.label.clone()).collect(),
                )
            })
            .collect();
        if risk != expected.risk {
            return Err(fail("violation tables"));
        }
        let res: BTreeMap<Assignment, Vec<Label>> = record
            .resolutions
            .iter()
            .map(|r| (assignment(&record, &r.state), r.actions.clone()))
            .collect();
        if res != expected.resolutions {
            return Err(fail("resolution tables"));
        }
        compared += 1;
    }
    Ok(compared)
}
