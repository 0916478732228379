//! Offline analysis: relevant dimensions, environment automaton, violation
//! predicate, product and the violation/resolution tables derived from it.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formula::{Atom, Formula, ServiceKind};
use crate::model::{EnvironmentGraph, Scope, StateRef};
use crate::mtl::{self, MtlError, TraceSpec};
use crate::property::{self, Property, PropertyError, PropertyKind, Strategy};

pub const DEFAULT_STATE_CAP: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckError {
    #[error("state space exceeds the cap of {cap} nodes")]
    StateSpaceLimit { cap: usize },
    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),
    #[error("no dimensions to analyze")]
    NoDimensions,
    #[error(transparent)]
    Mtl(#[from] MtlError),
    #[error("malformed analysis file: {0}")]
    File(String),
}

impl From<PropertyError> for CheckError {
    fn from(e: PropertyError) -> Self {
        CheckError::UnsupportedShape(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dim {
    pub state: StateRef,
    pub domain: Vec<String>,
}

/// The ordered state dimensions an analysis runs over.
#[derive(Debug, Clone, Default)]
pub struct StateDims {
    dims: Vec<Dim>,
    index: HashMap<StateRef, usize>,
}

impl StateDims {
    pub fn new(dims: Vec<Dim>) -> Self {
        let index = dims.iter().enumerate().map(|(i, d)| (d.state.clone(), i)).collect();
        StateDims { dims, index }
    }

    pub fn dims(&self) -> &[Dim] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn position(&self, r: &StateRef) -> Option<usize> {
        self.index.get(r).copied()
    }

    pub fn refs(&self) -> impl Iterator<Item = &StateRef> {
        self.dims.iter().map(|d| &d.state)
    }

    /// Current values of the dimensions in the graph.
    pub fn project(&self, graph: &EnvironmentGraph) -> EnvState {
        EnvState(
            self.dims
                .iter()
                .map(|d| graph.value_index(&d.state).unwrap_or(0) as u16)
                .collect(),
        )
    }

    pub fn values(&self, s: &EnvState) -> Vec<String> {
        self.dims
            .iter()
            .zip(&s.0)
            .map(|(d, v)| d.domain[*v as usize].clone())
            .collect()
    }

    pub fn parse_values(&self, values: &[String]) -> Option<EnvState> {
        if values.len() != self.dims.len() {
            return None;
        }
        self.dims
            .iter()
            .zip(values)
            .map(|(d, v)| d.domain.iter().position(|x| x == v).map(|i| i as u16))
            .collect::<Option<Vec<_>>>()
            .map(EnvState)
    }

    pub fn describe(&self, s: &EnvState) -> String {
        let parts: Vec<String> = self
            .dims
            .iter()
            .zip(&s.0)
            .map(|(d, v)| format!("{}={}", d.state, d.domain[*v as usize]))
            .collect();
        format!("({})", parts.join(", "))
    }

    /// Truth of a state atom in `s`; `None` when the atom is not a tracked
    /// state atom.
    pub fn atom_holds(&self, s: &EnvState, atom: &Atom) -> Option<bool> {
        match atom {
            Atom::State { state, value } => {
                let i = self.position(state)?;
                Some(self.dims[i].domain[s.0[i] as usize] == *value)
            }
            _ => None,
        }
    }
}

/// Value indices, one per dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EnvState(pub Vec<u16>);

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Label {
    Event {
        event_type: String,
        location: String,
        payload: String,
    },
    Action {
        action_type: String,
        location: String,
    },
}

impl Label {
    pub fn controllable(&self) -> bool {
        matches!(self, Label::Action { .. })
    }

    pub fn matches_occurrence(&self, kind: ServiceKind, service: &str, loc: &str) -> bool {
        match (self, kind) {
            (
                Label::Event {
                    event_type, location, ..
                },
                ServiceKind::Event,
            ) => event_type == service && location == loc,
            (Label::Action { action_type, location }, ServiceKind::Action) => action_type == service && location == loc,
            _ => false,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Event {
                event_type,
                location,
                payload,
            } => write!(f, "{location}.{event_type}={payload}"),
            Label::Action { action_type, location } => write!(f, "{location}.{action_type}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Transition {
    pub label: Label,
    pub controllable: bool,
}

impl From<Label> for Transition {
    fn from(label: Label) -> Self {
        Transition {
            controllable: label.controllable(),
            label,
        }
    }
}

/// Closure of the formula's state atoms under "actions affecting a space
/// state bring their device states and effect preconditions along".
pub fn relevant_dimensions(formula: &Formula, graph: &EnvironmentGraph) -> StateDims {
    let mut set: BTreeSet<StateRef> = BTreeSet::new();
    for atom in formula.atoms() {
        match atom {
            Atom::State { state, .. } => {
                set.insert(state.clone());
            }
            Atom::Occurs {
                kind: ServiceKind::Action,
                service,
                location,
            } => {
                if let Ok(a) = graph.find_action(service, location) {
                    set.extend(a.device_refs());
                }
            }
            Atom::Occurs {
                kind: ServiceKind::Event,
                service,
                location,
            } => {
                if let Ok(e) = graph.find_event(service, location) {
                    set.insert(StateRef::space(location.clone(), e.target_state.clone()));
                }
            }
            Atom::Path { .. } => {}
        }
    }
    let mut work: Vec<StateRef> = set.iter().filter(|r| r.scope == Scope::Space).cloned().collect();
    while let Some(space_ref) = work.pop() {
        for action in &graph.actions {
            for effect in action.effects.iter().filter(|e| e.target() == space_ref) {
                let mut pulled: Vec<StateRef> = action.device_refs().collect();
                if let Some(pre) = &effect.precondition {
                    pulled.push(pre.state.clone());
                    if let crate::model::CondTarget::ReferTo(r) = &pre.target {
                        pulled.push(r.clone());
                    }
                }
                for r in pulled {
                    if set.insert(r.clone()) && r.scope == Scope::Space {
                        work.push(r);
                    }
                }
            }
        }
    }
    StateDims::new(
        set.into_iter()
            .filter_map(|r| {
                let domain = graph.slot(&r).ok()?.domain.clone();
                Some(Dim { state: r, domain })
            })
            .collect(),
    )
}

#[derive(Debug, Clone)]
pub struct EnvAutomaton {
    pub dims: StateDims,
    pub nodes: Vec<EnvState>,
    pub edges: Vec<(usize, Transition, usize)>,
    pub initial: usize,
    index: HashMap<EnvState, usize>,
}

impl EnvAutomaton {
    pub fn node_index(&self, s: &EnvState) -> Option<usize> {
        self.index.get(s).copied()
    }
}

enum Step {
    Set(usize, u16),
    Action(usize),
}

/// Every transition touching the dimensions, with how to apply it.
fn transitions(dims: &StateDims, graph: &EnvironmentGraph) -> Vec<(Transition, Step)> {
    let mut out = Vec::new();
    for e in &graph.events {
        let r = StateRef::space(e.location.clone(), e.target_state.clone());
        let Some(i) = dims.position(&r) else { continue };
        for (v, payload) in dims.dims[i].domain.iter().enumerate() {
            let label = Label::Event {
                event_type: e.event_type.clone(),
                location: e.location.clone(),
                payload: payload.clone(),
            };
            out.push((label.into(), Step::Set(i, v as u16)));
        }
    }
    for (ai, a) in graph.actions.iter().enumerate() {
        let touches = a.device_refs().any(|r| dims.position(&r).is_some())
            || a.effects.iter().any(|e| dims.position(&e.target()).is_some());
        if touches {
            let label = Label::Action {
                action_type: a.action_type.clone(),
                location: a.location.clone(),
            };
            out.push((label.into(), Step::Action(ai)));
        }
    }
    out
}

/// Successor of `s` under an action, projected to the dimensions.
pub fn step_action(dims: &StateDims, graph: &EnvironmentGraph, action: usize, s: &EnvState) -> EnvState {
    let value_of = |r: &StateRef| dims.position(r).map(|i| s.0[i] as usize);
    let mut next = s.clone();
    for (r, v) in graph.actions[action].updates(graph, value_of) {
        if let Some(i) = dims.position(&r) {
            next.0[i] = v as u16;
        }
    }
    next
}

/// Breadth-first exploration from the graph's current values.
pub fn build_env_automaton(dims: StateDims, graph: &EnvironmentGraph, cap: usize) -> Result<EnvAutomaton, CheckError> {
    if dims.is_empty() {
        return Err(CheckError::NoDimensions);
    }
    let trans = transitions(&dims, graph);
    let start = dims.project(graph);
    let mut nodes = vec![start.clone()];
    let mut index = HashMap::from([(start, 0usize)]);
    if cap == 0 {
        return Err(CheckError::StateSpaceLimit { cap });
    }
    let mut edges = Vec::new();
    let mut queue = VecDeque::from([0usize]);
    while let Some(n) = queue.pop_front() {
        let s = nodes[n].clone();
        for (t, step) in &trans {
            let next = match step {
                Step::Set(i, v) => {
                    let mut next = s.clone();
                    next.0[*i] = *v;
                    next
                }
                Step::Action(ai) => step_action(&dims, graph, *ai, &s),
            };
            if next == s {
                continue;
            }
            let target = match index.get(&next) {
                Some(&j) => j,
                None => {
                    if nodes.len() >= cap {
                        return Err(CheckError::StateSpaceLimit { cap });
                    }
                    let j = nodes.len();
                    index.insert(next.clone(), j);
                    nodes.push(next);
                    queue.push_back(j);
                    j
                }
            };
            edges.push((n, t.clone(), target));
        }
    }
    Ok(EnvAutomaton {
        dims,
        nodes,
        edges,
        initial: 0,
        index,
    })
}

/// Node and edge predicates of the negated property `F(chi)`.
#[derive(Debug, Clone)]
pub struct ViolationPredicate {
    /// `chi` with an action occurrence read as "the provider's post-state
    /// holds" and an event occurrence read as false.
    pub node: Formula,
    /// Occurrence label and `chi` with the occurrence set to true.
    pub edge: Option<(ServiceKind, String, String, Formula)>,
}

impl ViolationPredicate {
    pub fn node_holds(&self, dims: &StateDims, s: &EnvState) -> bool {
        self.node.eval(&|a| dims.atom_holds(s, a).unwrap_or(false))
    }

    pub fn edge_holds(&self, dims: &StateDims, source: &EnvState, label: &Label) -> bool {
        match &self.edge {
            Some((kind, service, loc, f)) if label.matches_occurrence(*kind, service, loc) => {
                f.eval(&|a| dims.atom_holds(source, a).unwrap_or(false))
            }
            _ => false,
        }
    }
}

pub fn build_violation_predicate(
    negated: &Formula,
    graph: &EnvironmentGraph,
) -> Result<ViolationPredicate, CheckError> {
    let chi = match negated {
        Formula::Eventually(chi) if chi.is_propositional() => chi.as_ref(),
        other => return Err(CheckError::UnsupportedShape(other.to_string())),
    };
    let occs: BTreeSet<&Atom> = chi
        .atoms()
        .into_iter()
        .filter(|a| matches!(a, Atom::Occurs { .. }))
        .collect();
    if occs.len() > 1 {
        return Err(CheckError::UnsupportedShape(format!(
            "more than one occurrence atom in {chi}"
        )));
    }
    let node = chi.map_atoms(&mut |a| {
        Ok::<_, CheckError>(match a {
            Atom::Occurs {
                kind: ServiceKind::Action,
                service,
                location,
            } => {
                let action = graph
                    .find_action(service, location)
                    .map_err(|e| CheckError::UnsupportedShape(e.to_string()))?;
                Formula::or_all(
                    action
                        .device_refs()
                        .map(|r| Formula::Atom(Atom::state(r, &action.post_value))),
                )
                .unwrap_or(Formula::False)
            }
            Atom::Occurs { .. } => Formula::False,
            other => Formula::Atom(other.clone()),
        })
    })?;
    let edge = match occs.into_iter().next() {
        Some(Atom::Occurs {
            kind,
            service,
            location,
        }) => {
            let f = chi.map_atoms(&mut |a| {
                Ok::<_, CheckError>(match a {
                    Atom::Occurs { .. } => Formula::True,
                    other => Formula::Atom(other.clone()),
                })
            })?;
            Some((*kind, service.clone(), location.clone(), f))
        }
        _ => None,
    };
    Ok(ViolationPredicate { node, edge })
}

#[derive(Debug, Clone)]
pub struct ProductAutomaton {
    pub env: EnvAutomaton,
    pub accepting: Vec<bool>,
    pub accepting_edges: Vec<bool>,
}

impl ProductAutomaton {
    pub fn accepting_states(&self) -> BTreeSet<EnvState> {
        self.env
            .nodes
            .iter()
            .zip(&self.accepting)
            .filter(|(_, a)| **a)
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// The safety monitor has two states and is determined by the environment
/// state, so the product keeps the environment carrier and marks it.
pub fn product(env: EnvAutomaton, pred: &ViolationPredicate) -> ProductAutomaton {
    let accepting = env.nodes.iter().map(|s| pred.node_holds(&env.dims, s)).collect();
    let accepting_edges = env
        .edges
        .iter()
        .map(|(s, t, _)| pred.edge_holds(&env.dims, &env.nodes[*s], &t.label))
        .collect();
    ProductAutomaton {
        env,
        accepting,
        accepting_edges,
    }
}

pub fn extract_violations(p: &ProductAutomaton) -> BTreeMap<EnvState, BTreeSet<Transition>> {
    let mut out: BTreeMap<EnvState, BTreeSet<Transition>> = BTreeMap::new();
    for (k, (s, t, d)) in p.env.edges.iter().enumerate() {
        if !p.accepting[*s] && (p.accepting[*d] || p.accepting_edges[k]) {
            out.entry(p.env.nodes[*s].clone()).or_default().insert(t.clone());
        }
    }
    out
}

/// Resolution actions per accepting state. Ties are broken by: effects
/// disjoint from `others` first, then fewest changed dimensions, then name.
pub fn extract_resolutions(
    p: &ProductAutomaton,
    graph: &EnvironmentGraph,
    others: &BTreeSet<StateRef>,
) -> BTreeMap<EnvState, Vec<Label>> {
    let mut best: BTreeMap<usize, BTreeMap<Label, (bool, usize)>> = BTreeMap::new();
    for (n, acc) in p.accepting.iter().enumerate() {
        if *acc {
            best.insert(n, BTreeMap::new());
        }
    }
    for (k, (s, t, d)) in p.env.edges.iter().enumerate() {
        if !(p.accepting[*s] && !p.accepting[*d] && !p.accepting_edges[k] && t.controllable) {
            continue;
        }
        let Label::Action { action_type, location } = &t.label else {
            continue;
        };
        let touches_others = graph
            .find_action(action_type, location)
            .map(|a| {
                a.device_refs()
                    .chain(a.effects.iter().map(|e| e.target()))
                    .any(|r| others.contains(&r))
            })
            .unwrap_or(false);
        let changed = p.env.nodes[*s]
            .0
            .iter()
            .zip(&p.env.nodes[*d].0)
            .filter(|(a, b)| a != b)
            .count();
        let entry = best.get_mut(s).expect("accepting source");
        let key = (touches_others, changed);
        entry
            .entry(t.label.clone())
            .and_modify(|k| *k = (*k).min(key))
            .or_insert(key);
    }
    best.into_iter()
        .map(|(n, labels)| {
            let mut v: Vec<((bool, usize), Label)> = labels.into_iter().map(|(l, k)| (k, l)).collect();
            v.sort_by(|a, b| {
                a.0.cmp(&b.0)
                    .then_with(|| label_name(&a.1).cmp(&label_name(&b.1)))
                    .then_with(|| a.1.cmp(&b.1))
            });
            (p.env.nodes[n].clone(), v.into_iter().map(|(_, l)| l).collect())
        })
        .collect()
}

fn label_name(l: &Label) -> (&str, &str) {
    match l {
        Label::Action { action_type, location } => (action_type, location),
        Label::Event {
            event_type, location, ..
        } => (event_type, location),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskEntry {
    pub state: Vec<String>,
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionEntry {
    pub state: Vec<String>,
    pub actions: Vec<Label>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisRecord {
    pub property_id: u32,
    pub kind: PropertyKind,
    pub strategy: Strategy,
    pub formula: String,
    pub dims: Vec<Dim>,
    pub initial: Vec<String>,
    pub node_count: usize,
    pub edge_count: usize,
    pub violated_states: Vec<Vec<String>>,
    pub violation_trans: Vec<RiskEntry>,
    pub resolutions: Vec<ResolutionEntry>,
    pub unresolvable: Vec<Vec<String>>,
    pub trace_spec: Option<TraceSpec>,
}

impl AnalysisRecord {
    pub fn state_dims(&self) -> StateDims {
        StateDims::new(self.dims.clone())
    }
}

/// The formula whose negation is analysed, with the trace spec for timed
/// properties. For those, the violating states are the states where the
/// condition fails and the dimensions also cover the trigger.
fn analysis_target(prop: &Property) -> Result<(Formula, Formula, Option<TraceSpec>), CheckError> {
    match prop.kind {
        PropertyKind::Spatial => {
            let negated = property::negate(&prop.formula)?;
            Ok((negated.clone(), negated, None))
        }
        PropertyKind::Temporal => {
            let spec = mtl::to_trace_spec(prop.id, &prop.formula)?;
            let negated = Formula::eventually(spec.condition.nnf(true));
            let scope = Formula::and(spec.trigger.clone(), spec.condition.clone());
            Ok((negated, scope, Some(spec)))
        }
    }
}

/// State references a property constrains, used for the resolution
/// tie-break of other properties.
pub fn property_refs(prop: &Property, graph: &EnvironmentGraph) -> BTreeSet<StateRef> {
    let mut out = BTreeSet::new();
    for atom in prop.formula.atoms() {
        match atom {
            Atom::State { state, .. } => {
                out.insert(state.clone());
            }
            Atom::Occurs {
                kind: ServiceKind::Action,
                service,
                location,
            } => {
                if let Ok(a) = graph.find_action(service, location) {
                    out.extend(a.device_refs());
                }
            }
            _ => {}
        }
    }
    out
}

/// Runs the full pipeline for one property.
pub fn analyze_property(
    prop: &Property,
    graph: &EnvironmentGraph,
    others: &BTreeSet<StateRef>,
    cap: usize,
) -> Result<AnalysisRecord, CheckError> {
    let (negated, scope, trace_spec) = analysis_target(prop)?;
    let dims = relevant_dimensions(&scope, graph);
    let pred = build_violation_predicate(&negated, graph)?;
    let env = build_env_automaton(dims, graph, cap)?;
    let prod = product(env, &pred);
    Ok(record_from_product(prop, &prod, graph, others, trace_spec))
}

fn record_from_product(
    prop: &Property,
    prod: &ProductAutomaton,
    graph: &EnvironmentGraph,
    others: &BTreeSet<StateRef>,
    trace_spec: Option<TraceSpec>,
) -> AnalysisRecord {
    let dims = &prod.env.dims;
    let violations = extract_violations(prod);
    let resolutions = extract_resolutions(prod, graph, others);
    let unresolvable = resolutions
        .iter()
        .filter(|(_, v)| v.is_empty())
        .map(|(s, _)| dims.values(s))
        .collect();
    AnalysisRecord {
        property_id: prop.id,
        kind: prop.kind,
        strategy: prop.strategy,
        formula: prop.formula.to_string(),
        dims: dims.dims().to_vec(),
        initial: dims.values(&prod.env.nodes[prod.env.initial]),
        node_count: prod.env.nodes.len(),
        edge_count: prod.env.edges.len(),
        violated_states: prod.accepting_states().iter().map(|s| dims.values(s)).collect(),
        violation_trans: violations
            .into_iter()
            .map(|(s, t)| RiskEntry {
                state: dims.values(&s),
                transitions: t.into_iter().collect(),
            })
            .collect(),
        resolutions: resolutions
            .into_iter()
            .map(|(s, actions)| ResolutionEntry {
                state: dims.values(&s),
                actions,
            })
            .collect(),
        unresolvable,
        trace_spec,
    }
}

/// Analyses every property; resolution tie-breaks see the other
/// properties' state references.
pub fn analyze_all(
    props: &[Property],
    graph: &EnvironmentGraph,
    cap: usize,
) -> Result<Vec<AnalysisRecord>, CheckError> {
    let refs: Vec<BTreeSet<StateRef>> = props.iter().map(|p| property_refs(p, graph)).collect();
    props
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let others: BTreeSet<StateRef> = refs
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, r)| r.iter().cloned())
                .collect();
            analyze_property(p, graph, &others, cap)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisFile {
    pub records: Vec<AnalysisRecord>,
}

impl AnalysisFile {
    pub fn to_text(&self) -> String {
        crate::model::canonical_json(self)
    }

    pub fn from_text(text: &str) -> Result<Self, CheckError> {
        serde_json::from_str(text).map_err(|e| CheckError::File(e.to_string()))
    }
}

/// One warning line per accepting state without a controllable exit.
pub fn unresolvable_warnings(records: &[AnalysisRecord]) -> Vec<String> {
    let mut out = Vec::new();
    for r in records {
        for state in &r.unresolvable {
            let assignment: BTreeMap<String, &String> = r
                .dims
                .iter()
                .zip(state)
                .map(|(d, v)| (d.state.to_string(), v))
                .collect();
            out.push(
                serde_json::json!({
                    "severity": "warning",
                    "code": "W_UNRESOLVABLE",
                    "property": r.property_id,
                    "state": assignment,
                    "message": "no controllable action leaves this violated state",
                })
                .to_string(),
            );
        }
    }
    out
}
