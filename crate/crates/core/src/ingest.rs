//! Space-information and device-description parsing, and construction of
//! the environment graph with merging of equivalent services.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{
    ActionInstance, CmpOp, CondTarget, DeviceNode, EffectKind, EffectSpec, EnvironmentGraph, EventInstance,
    PreConditionSpec, Scope, SpaceNode, StateRef, StateSlot,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IngestError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("duplicate space id `{0}`")]
    DuplicateSpace(String),
    #[error("duplicate device id `{0}`")]
    DuplicateDevice(String),
    #[error("device `{device}` is located in unknown space `{space}`")]
    DanglingLocation { device: String, space: String },
    #[error("space `{space}` references unknown space `{other}`")]
    DanglingSpace { space: String, other: String },
    #[error("`{owner}` has no state `{state}`")]
    UnknownState { owner: String, state: String },
    #[error("state {state}: {message}")]
    ConflictingDomain { state: String, message: String },
    #[error("invalid {what} on {state}: {message}")]
    InvalidEffect {
        what: &'static str,
        state: String,
        message: String,
    },
    #[error("cyclic referTo chain through {0}")]
    CyclicReferTo(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

fn json_error(e: serde_json::Error) -> IngestError {
    use serde_json::error::Category;
    match e.classify() {
        Category::Data => IngestError::Schema(e.to_string()),
        _ => IngestError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateDecl {
    pub domain: Vec<String>,
    #[serde(default)]
    pub ordered: bool,
    pub initial: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceDescription {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    #[serde(default)]
    pub states: BTreeMap<String, StateDecl>,
    #[serde(default)]
    pub adjacent_to: Vec<String>,
    #[serde(default)]
    pub reachable_to: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceMeta {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub location: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventServiceDecl {
    pub event_type: String,
    pub target_state: String,
    pub topic: String,
    /// Optional payload domain; must equal the target state's domain.
    #[serde(default)]
    pub payload: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreconditionDecl {
    /// `Owner.state`
    pub state: String,
    pub operator: CmpOp,
    #[serde(default)]
    pub value: Option<String>,
    /// `Space.state` of an adjacent space.
    #[serde(default)]
    pub refer_to: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectTypeDecl {
    Set,
    Increase,
    Decrease,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectDecl {
    pub state_name: String,
    pub effect_type: EffectTypeDecl,
    #[serde(default)]
    pub value: Option<String>,
    /// Defaults to the device's location.
    #[serde(default)]
    pub affected_space: Option<String>,
    #[serde(default)]
    pub precondition: Option<PreconditionDecl>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionServiceDecl {
    pub action_type: String,
    /// Device state written by the action.
    pub state: String,
    /// Value written to `state`.
    pub value: String,
    pub url: String,
    #[serde(default)]
    pub inverse: Option<String>,
    #[serde(default)]
    pub effects: Vec<EffectDecl>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceDescription {
    pub meta: DeviceMeta,
    #[serde(default)]
    pub device_state: BTreeMap<String, StateDecl>,
    #[serde(default)]
    pub event_services: Vec<EventServiceDecl>,
    #[serde(default)]
    pub action_services: Vec<ActionServiceDecl>,
}

/// Parses a space file: a single space object, an array of spaces, or
/// `{"spaces": [...]}`.
pub fn parse_space_descriptions(text: &str) -> Result<Vec<SpaceDescription>, IngestError> {
    let value: Value = serde_json::from_str(text).map_err(json_error)?;
    let items = match value {
        Value::Array(items) => items,
        Value::Object(mut map) if map.contains_key("spaces") => {
            if map.len() != 1 {
                let extra: Vec<_> = map.keys().filter(|k| *k != "spaces").cloned().collect();
                return Err(IngestError::Schema(format!("unknown field `{}`", extra.join("`, `"))));
            }
            match map.remove("spaces") {
                Some(Value::Array(items)) => items,
                _ => return Err(IngestError::Schema("`spaces` must be an array".into())),
            }
        }
        other => vec![other],
    };
    items
        .into_iter()
        .map(|v| serde_json::from_value(v).map_err(json_error))
        .collect()
}

pub fn parse_device_description(text: &str) -> Result<DeviceDescription, IngestError> {
    // Two-step parse keeps syntax errors positioned and schema errors named.
    let value: Value = serde_json::from_str(text).map_err(json_error)?;
    serde_json::from_value(value).map_err(json_error)
}

fn json_files(path: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let io = |e: std::io::Error| IngestError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(path).map_err(io)? {
        let p = entry.map_err(io)?.path();
        if p.extension().and_then(|e| e.to_str()) == Some("json") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn read(path: &Path) -> Result<String, IngestError> {
    std::fs::read_to_string(path).map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn with_path(path: &Path, e: IngestError) -> IngestError {
    match e {
        IngestError::Schema(m) => IngestError::Schema(format!("{}: {m}", path.display())),
        IngestError::Syntax { line, column, message } => IngestError::Syntax {
            line,
            column,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

/// Loads every `*.json` space file under `path` (or the single file).
pub fn load_spaces(path: &Path) -> Result<Vec<SpaceDescription>, IngestError> {
    let mut out = Vec::new();
    for f in json_files(path)? {
        out.extend(parse_space_descriptions(&read(&f)?).map_err(|e| with_path(&f, e))?);
    }
    Ok(out)
}

pub fn load_devices(path: &Path) -> Result<Vec<DeviceDescription>, IngestError> {
    json_files(path)?
        .into_iter()
        .map(|f| parse_device_description(&read(&f)?).map_err(|e| with_path(&f, e)))
        .collect()
}

fn to_slot(owner: &str, name: &str, decl: &StateDecl) -> Result<StateSlot, IngestError> {
    let unique: BTreeSet<_> = decl.domain.iter().collect();
    if decl.domain.is_empty() || unique.len() != decl.domain.len() {
        return Err(IngestError::ConflictingDomain {
            state: format!("{owner}.{name}"),
            message: "domain must be non-empty with distinct values".into(),
        });
    }
    if !decl.domain.contains(&decl.initial) {
        return Err(IngestError::ConflictingDomain {
            state: format!("{owner}.{name}"),
            message: format!("initial value `{}` is not in the domain", decl.initial),
        });
    }
    Ok(StateSlot {
        domain: decl.domain.iter().map(|s| s.trim().to_string()).collect(),
        ordered: decl.ordered,
        current: decl.initial.trim().to_string(),
    })
}

/// Resolves `Owner.state` against spaces first, then devices.
fn resolve_ref(graph: &EnvironmentGraph, text: &str) -> Result<StateRef, IngestError> {
    let (owner, name) = text
        .trim()
        .split_once('.')
        .ok_or_else(|| IngestError::Schema(format!("state reference `{text}` must be `Owner.state`")))?;
    let r = if graph.spaces.contains_key(owner) {
        StateRef::space(owner, name)
    } else {
        StateRef::device(owner, name)
    };
    graph.slot(&r).map_err(|_| IngestError::UnknownState {
        owner: owner.to_string(),
        state: name.to_string(),
    })?;
    Ok(r)
}

fn build_effect(
    graph: &EnvironmentGraph,
    device: &DeviceDescription,
    decl: &EffectDecl,
) -> Result<EffectSpec, IngestError> {
    let space = decl
        .affected_space
        .clone()
        .unwrap_or_else(|| device.meta.location.clone());
    let target = StateRef::space(&space, decl.state_name.trim());
    let slot = graph.slot(&target).map_err(|_| IngestError::UnknownState {
        owner: space.clone(),
        state: decl.state_name.clone(),
    })?;
    let effect = match decl.effect_type {
        EffectTypeDecl::Set => {
            let value = decl
                .value
                .as_deref()
                .map(str::trim)
                .ok_or_else(|| IngestError::Schema(format!("set effect on {target} requires `value`")))?;
            if slot.index_of(value).is_none() {
                return Err(IngestError::InvalidEffect {
                    what: "effect",
                    state: target.to_string(),
                    message: format!("value `{value}` not in domain"),
                });
            }
            EffectKind::Set {
                value: value.to_string(),
            }
        }
        EffectTypeDecl::Increase | EffectTypeDecl::Decrease => {
            if !slot.ordered {
                return Err(IngestError::InvalidEffect {
                    what: "effect",
                    state: target.to_string(),
                    message: "increase/decrease requires an ordered domain".into(),
                });
            }
            if decl.effect_type == EffectTypeDecl::Increase {
                EffectKind::Increase
            } else {
                EffectKind::Decrease
            }
        }
    };
    let precondition = match &decl.precondition {
        None => None,
        Some(p) => Some(build_precondition(graph, p)?),
    };
    Ok(EffectSpec {
        state_name: decl.state_name.trim().to_string(),
        effect,
        affected_space: space,
        precondition,
    })
}

fn build_precondition(graph: &EnvironmentGraph, p: &PreconditionDecl) -> Result<PreConditionSpec, IngestError> {
    let state = resolve_ref(graph, &p.state)?;
    let slot = graph.slot(&state).expect("resolved");
    let invalid = |message: String| IngestError::InvalidEffect {
        what: "precondition",
        state: state.to_string(),
        message,
    };
    if p.operator.is_ordered() && !slot.ordered {
        return Err(invalid("ordered operator on an unordered domain".into()));
    }
    let target = match (&p.value, &p.refer_to) {
        (Some(v), None) => {
            if slot.index_of(v.trim()).is_none() {
                return Err(invalid(format!("value `{v}` not in domain")));
            }
            CondTarget::Value(v.trim().to_string())
        }
        (None, Some(r)) => {
            let other = resolve_ref(graph, r)?;
            if other.scope != Scope::Space || state.scope != Scope::Space {
                return Err(invalid("referTo must relate two space states".into()));
            }
            let adjacent = other.owner == state.owner
                || graph
                    .spaces
                    .get(&state.owner)
                    .is_some_and(|s| s.adjacent_to.contains(&other.owner));
            if !adjacent {
                return Err(invalid(format!("referTo target {other} is not in an adjacent space")));
            }
            let other_slot = graph.slot(&other).expect("resolved");
            if other_slot.domain != slot.domain {
                return Err(IngestError::ConflictingDomain {
                    state: other.to_string(),
                    message: format!("domain differs from {state}"),
                });
            }
            CondTarget::ReferTo(other)
        }
        _ => return Err(invalid("exactly one of `value` or `refer_to` is required".into())),
    };
    Ok(PreConditionSpec {
        state,
        operator: p.operator,
        target,
    })
}

/// Builds the graph. Equivalent event services are merged with the union
/// of their topics; equivalent action services (same type, location,
/// device-state change and canonical effect set) with the union of URLs.
pub fn build_representation(
    spaces: &[SpaceDescription],
    devices: &[DeviceDescription],
) -> Result<EnvironmentGraph, IngestError> {
    let mut graph = EnvironmentGraph::default();
    for s in spaces {
        let id = s.id.trim().to_string();
        if graph.spaces.contains_key(&id) {
            return Err(IngestError::DuplicateSpace(id));
        }
        let mut states = BTreeMap::new();
        for (name, decl) in &s.states {
            states.insert(name.trim().to_string(), to_slot(&id, name, decl)?);
        }
        graph.spaces.insert(
            id.clone(),
            SpaceNode {
                id,
                kind: s.kind.clone(),
                attributes: s.attributes.clone(),
                states,
                adjacent_to: s.adjacent_to.iter().map(|a| a.trim().to_string()).collect(),
                reachable_to: s.reachable_to.iter().map(|a| a.trim().to_string()).collect(),
            },
        );
    }
    // adjacentTo is symmetric.
    let ids: Vec<String> = graph.spaces.keys().cloned().collect();
    for id in &ids {
        let adj: Vec<String> = graph.spaces[id].adjacent_to.iter().cloned().collect();
        let reach: Vec<String> = graph.spaces[id].reachable_to.iter().cloned().collect();
        for other in adj.iter().chain(reach.iter()) {
            if !graph.spaces.contains_key(other) {
                return Err(IngestError::DanglingSpace {
                    space: id.clone(),
                    other: other.clone(),
                });
            }
        }
        for other in adj {
            graph
                .spaces
                .get_mut(&other)
                .expect("checked")
                .adjacent_to
                .insert(id.clone());
        }
    }

    for d in devices {
        let id = d.meta.id.trim().to_string();
        if graph.devices.contains_key(&id) || graph.spaces.contains_key(&id) {
            return Err(IngestError::DuplicateDevice(id));
        }
        let location = d.meta.location.trim().to_string();
        if !graph.spaces.contains_key(&location) {
            return Err(IngestError::DanglingLocation {
                device: id,
                space: location,
            });
        }
        let mut state = BTreeMap::new();
        for (name, decl) in &d.device_state {
            state.insert(name.trim().to_string(), to_slot(&id, name, decl)?);
        }
        graph.devices.insert(
            id.clone(),
            DeviceNode {
                id,
                kind: d.meta.kind.clone(),
                state,
                located_in: location,
            },
        );
    }

    let mut events: BTreeMap<(String, String, String), BTreeMap<String, String>> = BTreeMap::new();
    type ActionKey = (String, String, String, String, Vec<EffectSpec>, Option<String>);
    let mut actions: BTreeMap<ActionKey, BTreeMap<String, String>> = BTreeMap::new();
    for d in devices {
        let id = d.meta.id.trim().to_string();
        let location = d.meta.location.trim().to_string();
        for ev in &d.event_services {
            let target = StateRef::space(&location, ev.target_state.trim());
            let slot = graph.slot(&target).map_err(|_| IngestError::UnknownState {
                owner: location.clone(),
                state: ev.target_state.clone(),
            })?;
            if let Some(payload) = &ev.payload {
                if payload != &slot.domain {
                    return Err(IngestError::ConflictingDomain {
                        state: target.to_string(),
                        message: format!("event {} declares a different payload domain", ev.event_type),
                    });
                }
            }
            events
                .entry((
                    ev.event_type.trim().to_string(),
                    location.clone(),
                    ev.target_state.trim().to_string(),
                ))
                .or_default()
                .insert(id.clone(), ev.topic.clone());
        }
        for act in &d.action_services {
            let dev_ref = StateRef::device(&id, act.state.trim());
            let slot = graph.slot(&dev_ref).map_err(|_| IngestError::UnknownState {
                owner: id.clone(),
                state: act.state.clone(),
            })?;
            if slot.index_of(act.value.trim()).is_none() {
                return Err(IngestError::ConflictingDomain {
                    state: dev_ref.to_string(),
                    message: format!("action {} writes `{}` outside the domain", act.action_type, act.value),
                });
            }
            let mut effects = act
                .effects
                .iter()
                .map(|e| build_effect(&graph, d, e))
                .collect::<Result<Vec<_>, _>>()?;
            effects.sort();
            effects.dedup();
            actions
                .entry((
                    act.action_type.trim().to_string(),
                    location.clone(),
                    act.state.trim().to_string(),
                    act.value.trim().to_string(),
                    effects,
                    act.inverse.as_ref().map(|s| s.trim().to_string()),
                ))
                .or_default()
                .insert(id.clone(), act.url.clone());
        }
    }
    graph.events = events
        .into_iter()
        .map(|((event_type, location, target_state), topics)| EventInstance {
            event_type,
            location,
            target_state,
            topics,
        })
        .collect();
    graph.actions = actions
        .into_iter()
        .map(
            |((action_type, location, device_state, post_value, effects, inverse), urls)| ActionInstance {
                action_type,
                location,
                device_state,
                post_value,
                urls,
                effects,
                inverse,
            },
        )
        .collect();
    check_refer_to_cycles(&graph)?;
    Ok(graph)
}

/// Rejects cycles in the relation "effect on X is conditioned on a
/// referenced state Y".
fn check_refer_to_cycles(graph: &EnvironmentGraph) -> Result<(), IngestError> {
    let mut succ: BTreeMap<StateRef, BTreeSet<StateRef>> = BTreeMap::new();
    for a in &graph.actions {
        for e in &a.effects {
            if let Some(PreConditionSpec {
                target: CondTarget::ReferTo(r),
                ..
            }) = &e.precondition
            {
                succ.entry(e.target()).or_default().insert(r.clone());
            }
        }
    }
    // 0 = unvisited, 1 = on stack, 2 = done
    fn visit(
        n: &StateRef,
        succ: &BTreeMap<StateRef, BTreeSet<StateRef>>,
        mark: &mut BTreeMap<StateRef, u8>,
    ) -> Result<(), IngestError> {
        match mark.get(n) {
            Some(1) => return Err(IngestError::CyclicReferTo(n.to_string())),
            Some(2) => return Ok(()),
            _ => {}
        }
        mark.insert(n.clone(), 1);
        if let Some(next) = succ.get(n) {
            for m in next {
                visit(m, succ, mark)?;
            }
        }
        mark.insert(n.clone(), 2);
        Ok(())
    }
    let mut mark = BTreeMap::new();
    for n in succ.keys() {
        visit(n, &succ, &mut mark)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: String,
    pub message: String,
}

impl Diagnostic {
    fn error(code: &str, message: String) -> Self {
        Self {
            severity: Severity::Error,
            code: code.to_string(),
            message,
        }
    }

    fn warning(code: &str, message: String) -> Self {
        Self {
            severity: Severity::Warning,
            code: code.to_string(),
            message,
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serde_json::to_string(self).map_err(|_| fmt::Error)?)
    }
}

/// Structural checks over a built (or hand-edited) graph.
pub fn validate_representation(graph: &EnvironmentGraph) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for (id, space) in &graph.spaces {
        for other in &space.adjacent_to {
            match graph.spaces.get(other) {
                None => out.push(Diagnostic::error(
                    "E_DANGLING_ADJACENCY",
                    format!("{id} is adjacent to unknown space {other}"),
                )),
                Some(o) if !o.adjacent_to.contains(id) => out.push(Diagnostic::error(
                    "E_ASYMMETRIC_ADJACENCY",
                    format!("{id} is adjacent to {other} but not vice versa"),
                )),
                _ => {}
            }
        }
    }
    for r in graph.all_state_refs() {
        let slot = graph.slot(&r).expect("enumerated");
        if slot.index_of(&slot.current).is_none() {
            out.push(Diagnostic::error(
                "E_DOMAIN",
                format!("{r} holds `{}` outside its domain", slot.current),
            ));
        }
    }
    for d in graph.devices.values() {
        if !graph.spaces.contains_key(&d.located_in) {
            out.push(Diagnostic::error(
                "E_DANGLING_LOCATION",
                format!("device {} is located in unknown space {}", d.id, d.located_in),
            ));
        }
    }
    for e in &graph.events {
        if graph.slot(&StateRef::space(&e.location, &e.target_state)).is_err() {
            out.push(Diagnostic::error(
                "E_DANGLING_EVENT",
                format!(
                    "event {} updates unknown state {}.{}",
                    e.event_type, e.location, e.target_state
                ),
            ));
        }
        for dev in e.topics.keys() {
            if !graph.devices.contains_key(dev) {
                out.push(Diagnostic::error(
                    "E_DANGLING_PROVIDER",
                    format!("event {} provided by unknown device {dev}", e.event_type),
                ));
            }
        }
    }
    for a in &graph.actions {
        for r in a.device_refs() {
            if graph.slot(&r).is_err() {
                out.push(Diagnostic::error(
                    "E_DANGLING_PROVIDER",
                    format!("action {} writes unknown device state {r}", a.action_type),
                ));
            }
        }
        for e in &a.effects {
            if graph.slot(&e.target()).is_err() {
                out.push(Diagnostic::error(
                    "E_DANGLING_EFFECT",
                    format!("action {} affects unknown state {}", a.action_type, e.target()),
                ));
            }
            if let Some(p) = &e.precondition {
                let mut refs = vec![&p.state];
                if let CondTarget::ReferTo(r) = &p.target {
                    refs.push(r);
                }
                for r in refs {
                    if graph.slot(r).is_err() {
                        out.push(Diagnostic::error(
                            "E_DANGLING_PRECONDITION",
                            format!("action {} is constrained by unknown state {r}", a.action_type),
                        ));
                    }
                }
            }
        }
    }
    let observed: BTreeSet<StateRef> = graph
        .events
        .iter()
        .map(|e| StateRef::space(&e.location, &e.target_state))
        .collect();
    for (id, space) in &graph.spaces {
        for name in space.states.keys() {
            let r = StateRef::space(id, name);
            if !observed.contains(&r) {
                out.push(Diagnostic::warning(
                    "W_UNOBSERVED_STATE",
                    format!("no event updates {r}"),
                ));
            }
        }
    }
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPACES: &str = r#"{"spaces": [
        {"id": "Lab", "type": "lab", "attributes": {"area": "50"},
         "states": {"temperature": {"domain": ["low", "medium", "high"], "ordered": true, "initial": "medium"},
                    "human": {"domain": ["detected", "undetected"], "initial": "undetected"}},
         "adjacent_to": ["Outdoor"]},
        {"id": "Outdoor", "type": "outdoor",
         "states": {"weather": {"domain": ["sun", "rain"], "initial": "sun"}}},
        {"id": "Corridor", "type": "corridor"}
    ]}"#;

    fn sensor(id: &str) -> String {
        format!(
            r#"{{"meta": {{"id": "{id}", "type": "presence", "location": "Lab"}},
               "event_services": [{{"event_type": "Human_Detect", "target_state": "human", "topic": "lab/{id}"}}]}}"#
        )
    }

    fn light(id: &str, pre: &str) -> String {
        format!(
            r#"{{"meta": {{"id": "{id}", "type": "light", "location": "Lab"}},
               "device_state": {{"power": {{"domain": ["off", "on"], "initial": "off"}}}},
               "action_services": [{{"action_type": "Light_TurnOn", "state": "power", "value": "on",
                  "url": "http://{id}/on", "effects": [{{"state_name": "temperature", "effect_type": "increase" {pre}}}]}}]}}"#
        )
    }

    #[test]
    fn parses_space_file() {
        let spaces = parse_space_descriptions(SPACES).unwrap();
        assert_eq!(spaces.len(), 3);
        assert!(spaces[2].states.is_empty());
    }

    #[test]
    fn syntax_error_has_position() {
        let err = parse_space_descriptions("{\"id\": \"Lab\",\n  \"type\" \"x\"}").unwrap_err();
        match err {
            IngestError::Syntax { line, column, .. } => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_and_missing_url_are_schema_errors() {
        let err = parse_space_descriptions(r#"{"id": "Lab", "type": "lab", "colour": "red"}"#).unwrap_err();
        assert!(matches!(&err, IngestError::Schema(m) if m.contains("colour")));
        let err = parse_device_description(
            r#"{"meta": {"id": "L", "type": "light", "location": "Lab"},
                "action_services": [{"action_type": "L_On", "state": "power", "value": "on"}]}"#,
        )
        .unwrap_err();
        assert!(matches!(&err, IngestError::Schema(m) if m.contains("url")));
    }

    #[test]
    fn duplicate_space_rejected() {
        let mut spaces = parse_space_descriptions(SPACES).unwrap();
        spaces.push(spaces[0].clone());
        assert_eq!(
            build_representation(&spaces, &[]).unwrap_err(),
            IngestError::DuplicateSpace("Lab".into())
        );
    }

    #[test]
    fn merges_equivalent_services() {
        let spaces = parse_space_descriptions(SPACES).unwrap();
        let devices: Vec<_> = [sensor("S1"), sensor("S2"), light("L1", ""), light("L2", "")]
            .iter()
            .map(|t| parse_device_description(t).unwrap())
            .collect();
        let g = build_representation(&spaces, &devices).unwrap();
        assert_eq!(g.events.len(), 1);
        assert_eq!(g.events[0].topics.len(), 2);
        assert_eq!(g.actions.len(), 1);
        assert_eq!(g.actions[0].urls.len(), 2);
    }

    #[test]
    fn different_preconditions_stay_distinct() {
        let spaces = parse_space_descriptions(SPACES).unwrap();
        let pre = r#", "precondition": {"state": "Outdoor.weather", "operator": "eq", "value": "rain"}"#;
        let devices: Vec<_> = [light("L1", ""), light("L2", pre)]
            .iter()
            .map(|t| parse_device_description(t).unwrap())
            .collect();
        let g = build_representation(&spaces, &devices).unwrap();
        assert_eq!(g.actions.len(), 2);
    }

    #[test]
    fn dangling_location() {
        let spaces = parse_space_descriptions(SPACES).unwrap();
        let mut d = parse_device_description(&sensor("S1")).unwrap();
        d.meta.location = "Attic".into();
        assert!(matches!(
            build_representation(&spaces, &[d]),
            Err(IngestError::DanglingLocation { .. })
        ));
    }

    #[test]
    fn refer_to_must_be_adjacent() {
        let spaces = parse_space_descriptions(SPACES).unwrap();
        let pre =
            r#", "precondition": {"state": "Lab.temperature", "operator": "lt", "refer_to": "Corridor.temperature"}"#;
        let d = parse_device_description(&light("L1", pre)).unwrap();
        assert!(build_representation(&spaces, &[d]).is_err());
    }

    #[test]
    fn validation_codes() {
        let spaces = parse_space_descriptions(SPACES).unwrap();
        let d = parse_device_description(&sensor("S1")).unwrap();
        let mut g = build_representation(&spaces, &[d]).unwrap();
        let diags = validate_representation(&g);
        assert!(diags.iter().all(|d| d.severity == Severity::Warning));
        assert!(diags
            .iter()
            .any(|d| d.code == "W_UNOBSERVED_STATE" && d.message.contains("Lab.temperature")));
        g.devices.get_mut("S1").unwrap().located_in = "Attic".into();
        assert!(validate_representation(&g)
            .iter()
            .any(|d| d.code == "E_DANGLING_LOCATION"));
    }
}
