//! In-memory environment representation: spaces, devices, the event and
//! action services they provide, and the deterministic update semantics
//! applied when events are observed or actions executed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("unknown event {event_type} at {location}")]
    UnknownEvent { event_type: String, location: String },
    #[error("event {event_type} at {location} matches {count} instances")]
    AmbiguousEvent {
        event_type: String,
        location: String,
        count: usize,
    },
    #[error("unknown action {action_type} at {location}")]
    UnknownAction { action_type: String, location: String },
    #[error("action {action_type} at {location} matches {count} distinct instances")]
    AmbiguousAction {
        action_type: String,
        location: String,
        count: usize,
    },
    #[error("value `{value}` is not in the domain of {state}")]
    DomainError { state: String, value: String },
    #[error("unknown state reference {0}")]
    UnknownStateRef(String),
    #[error("malformed snapshot: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Space,
    Device,
}

/// A named state variable on a space or a device.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateRef {
    pub scope: Scope,
    pub owner: String,
    pub name: String,
}

impl StateRef {
    pub fn space(owner: impl Into<String>, name: impl Into<String>) -> Self {
        Self {
            scope: Scope::Space,
            owner: owner.into(),
            name: name.into(),
        }
    }

    pub fn device(owner: impl Into<String>, name: impl Into<String>) -> Self {
        Self {
            scope: Scope::Device,
            owner: owner.into(),
            name: name.into(),
        }
    }
}

impl fmt::Display for StateRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.owner, self.name)
    }
}

/// A finite-domain state variable and its current value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSlot {
    pub domain: Vec<String>,
    #[serde(default)]
    pub ordered: bool,
    pub current: String,
}

impl StateSlot {
    pub fn index_of(&self, value: &str) -> Option<usize> {
        self.domain.iter().position(|v| v == value)
    }

    pub fn current_index(&self) -> usize {
        self.index_of(&self.current).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceNode {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    #[serde(default)]
    pub states: BTreeMap<String, StateSlot>,
    #[serde(default)]
    pub adjacent_to: BTreeSet<String>,
    #[serde(default)]
    pub reachable_to: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceNode {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub state: BTreeMap<String, StateSlot>,
    pub located_in: String,
}

/// A merged event service. The payload domain is the domain of the
/// location's `target_state`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventInstance {
    pub event_type: String,
    pub location: String,
    pub target_state: String,
    pub topics: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffectKind {
    Set { value: String },
    Increase,
    Decrease,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmpOp {
    Eq,
    Neq,
    Lt,
    Gt,
    Leq,
    Geq,
}

impl CmpOp {
    pub fn is_ordered(self) -> bool {
        !matches!(self, CmpOp::Eq | CmpOp::Neq)
    }

    /// Compares domain positions.
    pub fn holds(self, lhs: usize, rhs: usize) -> bool {
        match self {
            CmpOp::Eq => lhs == rhs,
            CmpOp::Neq => lhs != rhs,
            CmpOp::Lt => lhs < rhs,
            CmpOp::Gt => lhs > rhs,
            CmpOp::Leq => lhs <= rhs,
            CmpOp::Geq => lhs >= rhs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondTarget {
    Value(String),
    ReferTo(StateRef),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PreConditionSpec {
    pub state: StateRef,
    pub operator: CmpOp,
    pub target: CondTarget,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EffectSpec {
    pub state_name: String,
    pub effect: EffectKind,
    pub affected_space: String,
    #[serde(default)]
    pub precondition: Option<PreConditionSpec>,
}

impl EffectSpec {
    pub fn target(&self) -> StateRef {
        StateRef::space(&self.affected_space, &self.state_name)
    }
}

/// A merged action service. Every device in `urls` provides the same
/// device-state change and the same effects.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionInstance {
    pub action_type: String,
    pub location: String,
    pub device_state: String,
    pub post_value: String,
    pub urls: BTreeMap<String, String>,
    pub effects: Vec<EffectSpec>,
    #[serde(default)]
    pub inverse: Option<String>,
}

impl ActionInstance {
    pub fn device_refs(&self) -> impl Iterator<Item = StateRef> + '_ {
        self.urls
            .keys()
            .map(move |d| StateRef::device(d.clone(), self.device_state.clone()))
    }

    /// State changes this action produces. Current values are read through
    /// `value_of`, which returns the domain position of a state or `None`
    /// when the state is not tracked; effects on untracked states are
    /// skipped and preconditions over untracked states do not hold.
    /// Preconditions are all evaluated before anything is written.
    pub fn updates<F>(&self, graph: &EnvironmentGraph, value_of: F) -> Vec<(StateRef, usize)>
    where
        F: Fn(&StateRef) -> Option<usize>,
    {
        let mut out = Vec::new();
        for r in self.device_refs() {
            if let Ok(slot) = graph.slot(&r) {
                if let Some(idx) = slot.index_of(&self.post_value) {
                    if value_of(&r).is_some() {
                        out.push((r, idx));
                    }
                }
            }
        }
        for effect in &self.effects {
            let target = effect.target();
            let Some(cur) = value_of(&target) else {
                continue;
            };
            let Ok(slot) = graph.slot(&target) else {
                continue;
            };
            if let Some(pre) = &effect.precondition {
                if !precondition_holds(graph, pre, &value_of) {
                    continue;
                }
            }
            let next = match &effect.effect {
                EffectKind::Set { value } => match slot.index_of(value) {
                    Some(i) => i,
                    None => continue,
                },
                EffectKind::Increase => (cur + 1).min(slot.domain.len() - 1),
                EffectKind::Decrease => cur.saturating_sub(1),
            };
            out.push((target, next));
        }
        out
    }
}

/// Evaluates a precondition with values read through `value_of`.
pub fn precondition_holds<F>(graph: &EnvironmentGraph, pre: &PreConditionSpec, value_of: &F) -> bool
where
    F: Fn(&StateRef) -> Option<usize>,
{
    let Ok(slot) = graph.slot(&pre.state) else {
        return false;
    };
    let Some(lhs) = value_of(&pre.state) else {
        return false;
    };
    let rhs_symbol = match &pre.target {
        CondTarget::Value(v) => v.as_str(),
        CondTarget::ReferTo(r) => {
            let (Ok(other), Some(i)) = (graph.slot(r), value_of(r)) else {
                return false;
            };
            other.domain[i].as_str()
        }
    };
    match slot.index_of(rhs_symbol) {
        Some(rhs) => pre.operator.holds(lhs, rhs),
        None => pre.operator == CmpOp::Neq,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    ProvidedBy,
    Update,
    Has,
    Affect,
    ConstrainedBy,
    ReferTo,
    LocatedIn,
}

/// A typed relationship between two graph nodes, identified by
/// `kind:name` strings.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub kind: EdgeKind,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentGraph {
    pub spaces: BTreeMap<String, SpaceNode>,
    pub devices: BTreeMap<String, DeviceNode>,
    pub events: Vec<EventInstance>,
    pub actions: Vec<ActionInstance>,
}

/// Pretty JSON with object keys sorted, newline-terminated.
pub fn canonical_json<T: Serialize>(v: &T) -> String {
    let value = serde_json::to_value(v).expect("value serializes");
    let mut text = serde_json::to_string_pretty(&value).expect("value serializes");
    text.push('\n');
    text
}

pub fn event_node_id(e: &EventInstance) -> String {
    format!("event:{}@{}#{}", e.event_type, e.location, e.target_state)
}

pub fn action_node_id(index: usize, a: &ActionInstance) -> String {
    format!("action:{}@{}#{}", a.action_type, a.location, index)
}

impl EnvironmentGraph {
    pub fn slot(&self, r: &StateRef) -> Result<&StateSlot, ModelError> {
        let found = match r.scope {
            Scope::Space => self.spaces.get(&r.owner).and_then(|s| s.states.get(&r.name)),
            Scope::Device => self.devices.get(&r.owner).and_then(|d| d.state.get(&r.name)),
        };
        found.ok_or_else(|| ModelError::UnknownStateRef(r.to_string()))
    }

    fn slot_mut(&mut self, r: &StateRef) -> Result<&mut StateSlot, ModelError> {
        let found = match r.scope {
            Scope::Space => self.spaces.get_mut(&r.owner).and_then(|s| s.states.get_mut(&r.name)),
            Scope::Device => self.devices.get_mut(&r.owner).and_then(|d| d.state.get_mut(&r.name)),
        };
        found.ok_or_else(|| ModelError::UnknownStateRef(r.to_string()))
    }

    pub fn query_state(&self, r: &StateRef) -> Result<&str, ModelError> {
        self.slot(r).map(|s| s.current.as_str())
    }

    pub fn value_index(&self, r: &StateRef) -> Option<usize> {
        self.slot(r).ok().map(StateSlot::current_index)
    }

    /// Writes a value; returns whether it changed.
    pub fn set_state(&mut self, r: &StateRef, value: &str) -> Result<bool, ModelError> {
        let slot = self.slot_mut(r)?;
        if slot.index_of(value).is_none() {
            return Err(ModelError::DomainError {
                state: r.to_string(),
                value: value.to_string(),
            });
        }
        if slot.current == value {
            return Ok(false);
        }
        slot.current = value.to_string();
        Ok(true)
    }

    /// Every state variable in the graph, in canonical order.
    pub fn all_state_refs(&self) -> Vec<StateRef> {
        let mut out = Vec::new();
        for (id, s) in &self.spaces {
            for name in s.states.keys() {
                out.push(StateRef::space(id, name));
            }
        }
        for (id, d) in &self.devices {
            for name in d.state.keys() {
                out.push(StateRef::device(id, name));
            }
        }
        out
    }

    pub fn find_event(&self, event_type: &str, location: &str) -> Result<&EventInstance, ModelError> {
        let mut it = self
            .events
            .iter()
            .filter(|e| e.event_type == event_type && e.location == location);
        let first = it.next().ok_or_else(|| ModelError::UnknownEvent {
            event_type: event_type.to_string(),
            location: location.to_string(),
        })?;
        let extra = it.count();
        if extra > 0 {
            return Err(ModelError::AmbiguousEvent {
                event_type: event_type.to_string(),
                location: location.to_string(),
                count: extra + 1,
            });
        }
        Ok(first)
    }

    pub fn find_action(&self, action_type: &str, location: &str) -> Result<&ActionInstance, ModelError> {
        let mut it = self
            .actions
            .iter()
            .filter(|a| a.action_type == action_type && a.location == location);
        let first = it.next().ok_or_else(|| ModelError::UnknownAction {
            action_type: action_type.to_string(),
            location: location.to_string(),
        })?;
        let extra = it.count();
        if extra > 0 {
            return Err(ModelError::AmbiguousAction {
                action_type: action_type.to_string(),
                location: location.to_string(),
                count: extra + 1,
            });
        }
        Ok(first)
    }

    /// Sets the location's target state to `payload`. Returns the states
    /// whose value changed (empty when the payload equals the current value).
    pub fn apply_event(
        &mut self,
        event_type: &str,
        location: &str,
        payload: &str,
    ) -> Result<Vec<StateRef>, ModelError> {
        let ev = self.find_event(event_type, location)?;
        let r = StateRef::space(&ev.location, &ev.target_state);
        let changed = self.set_state(&r, payload)?;
        Ok(if changed { vec![r] } else { Vec::new() })
    }

    pub fn apply_action(&mut self, action_type: &str, location: &str) -> Result<Vec<StateRef>, ModelError> {
        let action = self.find_action(action_type, location)?;
        let updates = action.updates(self, |r| self.value_index(r));
        let mut originals = BTreeMap::new();
        for (r, idx) in updates {
            let slot = self.slot_mut(&r)?;
            originals.entry(r).or_insert_with(|| slot.current.clone());
            slot.current = slot.domain[idx].clone();
        }
        Ok(originals
            .into_iter()
            .filter(|(r, orig)| self.query_state(r).map(|v| v != orig).unwrap_or(false))
            .map(|(r, _)| r)
            .collect())
    }

    /// Deterministic, key-sorted serialization.
    pub fn snapshot(&self) -> String {
        canonical_json(self)
    }

    pub fn from_snapshot(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Snapshot(e.to_string()))
    }

    /// The typed relationships of the graph.
    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::new();
        let mut push = |kind, from: String, to: String| out.push(Edge { kind, from, to });
        for d in self.devices.values() {
            push(
                EdgeKind::LocatedIn,
                format!("device:{}", d.id),
                format!("space:{}", d.located_in),
            );
        }
        for e in &self.events {
            let id = event_node_id(e);
            for dev in e.topics.keys() {
                push(EdgeKind::ProvidedBy, id.clone(), format!("device:{dev}"));
            }
            push(EdgeKind::Update, id, format!("space:{}", e.location));
        }
        for (i, a) in self.actions.iter().enumerate() {
            let id = action_node_id(i, a);
            for dev in a.urls.keys() {
                push(EdgeKind::ProvidedBy, id.clone(), format!("device:{dev}"));
            }
            for (j, eff) in a.effects.iter().enumerate() {
                let eff_id = format!("effect:{i}.{j}");
                push(EdgeKind::Has, id.clone(), eff_id.clone());
                push(
                    EdgeKind::Affect,
                    eff_id.clone(),
                    format!("space:{}", eff.affected_space),
                );
                if let Some(pre) = &eff.precondition {
                    let pre_id = format!("precondition:{i}.{j}");
                    push(EdgeKind::ConstrainedBy, eff_id, pre_id.clone());
                    let owner = |r: &StateRef| match r.scope {
                        Scope::Space => format!("space:{}", r.owner),
                        Scope::Device => format!("device:{}", r.owner),
                    };
                    push(EdgeKind::ReferTo, pre_id.clone(), owner(&pre.state));
                    if let CondTarget::ReferTo(r) = &pre.target {
                        push(EdgeKind::ReferTo, pre_id, owner(r));
                    }
                }
            }
        }
        out.sort();
        out
    }
}
