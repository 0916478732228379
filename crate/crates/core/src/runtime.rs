//! Event-driven engine: state checking against precomputed tables, timer
//! based trace checking, and resolution planning and execution.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checker::{AnalysisRecord, EnvState, Label, StateDims};
use crate::formula::{Atom, Formula, ServiceKind};
use crate::model::{EnvironmentGraph, ModelError, StateRef};
use crate::mtl::TimerMode;
use crate::property::{PropertyKind, Strategy};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("unknown message: {0}")]
    UnknownMessage(String),
    #[error("clock regression: {timestamp} ms after {clock} ms")]
    ClockRegression { clock: u64, timestamp: u64 },
    #[error("malformed analysis: {0}")]
    BadAnalysis(String),
    #[error("malformed trace line {line}: {message}")]
    BadTrace { line: usize, message: String },
}

impl From<ModelError> for RuntimeError {
    fn from(e: ModelError) -> Self {
        RuntimeError::UnknownMessage(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Event,
    Action,
    /// Clock advance with no state change.
    Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Application,
    User,
    Resolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Proposed,
    Observed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeMessage {
    pub timestamp: u64,
    pub kind: MessageKind,
    #[serde(rename = "type", default, skip_serializing_if = "String::is_empty")]
    pub service: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub location: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Source>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
}

impl RuntimeMessage {
    pub fn event(timestamp: u64, event_type: &str, location: &str, payload: &str) -> Self {
        RuntimeMessage {
            timestamp,
            kind: MessageKind::Event,
            service: event_type.into(),
            location: location.into(),
            payload: Some(payload.into()),
            source: None,
            phase: None,
        }
    }

    pub fn action(timestamp: u64, action_type: &str, location: &str, source: Source, phase: Phase) -> Self {
        RuntimeMessage {
            timestamp,
            kind: MessageKind::Action,
            service: action_type.into(),
            location: location.into(),
            payload: None,
            source: Some(source),
            phase: Some(phase),
        }
    }

    pub fn tick(timestamp: u64) -> Self {
        RuntimeMessage {
            timestamp,
            kind: MessageKind::Tick,
            service: String::new(),
            location: String::new(),
            payload: None,
            source: None,
            phase: None,
        }
    }

    pub fn is_interceptable(&self) -> bool {
        self.kind == MessageKind::Action
            && self.phase == Some(Phase::Proposed)
            && self.source != Some(Source::Resolution)
    }

    fn from_label(timestamp: u64, label: &Label) -> Self {
        match label {
            Label::Action { action_type, location } => {
                RuntimeMessage::action(timestamp, action_type, location, Source::Resolution, Phase::Observed)
            }
            Label::Event {
                event_type,
                location,
                payload,
            } => RuntimeMessage::event(timestamp, event_type, location, payload),
        }
    }
}

/// Resolves a message against the graph.
pub fn message_label(graph: &EnvironmentGraph, m: &RuntimeMessage) -> Result<Option<Label>, RuntimeError> {
    match m.kind {
        MessageKind::Tick => Ok(None),
        MessageKind::Event => {
            let ev = graph.find_event(&m.service, &m.location)?;
            let payload = m
                .payload
                .clone()
                .ok_or_else(|| RuntimeError::UnknownMessage(format!("event {} without payload", m.service)))?;
            let slot = graph.slot(&StateRef::space(&ev.location, &ev.target_state))?;
            if slot.index_of(&payload).is_none() {
                return Err(ModelError::DomainError {
                    state: format!("{}.{}", ev.location, ev.target_state),
                    value: payload,
                }
                .into());
            }
            Ok(Some(Label::Event {
                event_type: m.service.clone(),
                location: m.location.clone(),
                payload,
            }))
        }
        MessageKind::Action => {
            graph.find_action(&m.service, &m.location)?;
            Ok(Some(Label::Action {
                action_type: m.service.clone(),
                location: m.location.clone(),
            }))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimerStatus {
    Armed,
    Running,
    Satisfied,
    Violated,
    Disarmed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveTimer {
    pub property_id: u32,
    pub armed_at: u64,
    pub deadline: u64,
    pub mode: TimerMode,
    pub status: TimerStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    SpatialViolation,
    TemporalViolation,
    Ok,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "snake_case")]
pub enum Offending {
    Message { message: RuntimeMessage },
    Timer { timer: ActiveTimer },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub property_id: Option<u32>,
    pub kind: VerdictKind,
    pub timestamp: u64,
    pub offending: Option<Offending>,
    /// Projection of the environment on the property's dimensions at
    /// detection.
    pub env_state: BTreeMap<String, String>,
    pub uncontrollable: bool,
}

impl Verdict {
    pub fn is_violation(&self) -> bool {
        self.kind != VerdictKind::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum PlanStep {
    Intercept { label: Label },
    Revoke { label: Label },
    Replace { label: Label },
    Modify { label: Label },
    Notify { reason: String },
}

impl PlanStep {
    /// The action this step dispatches to a device, if any.
    pub fn actuation(&self) -> Option<&Label> {
        match self {
            PlanStep::Revoke { label } | PlanStep::Replace { label } | PlanStep::Modify { label } => Some(label),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionPlan {
    pub property_id: u32,
    pub strategy: Strategy,
    pub steps: Vec<PlanStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub step: usize,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutedPlan {
    pub plan: ResolutionPlan,
    pub acks: Vec<Ack>,
    /// Set when a step failed and the remaining steps were skipped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notification: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("actuation failed: {0}")]
pub struct ActuationFailure(pub String);

/// Where plan steps are sent.
pub trait ActuationPort {
    fn dispatch(&mut self, step: &PlanStep, timestamp: u64) -> Result<(), ActuationFailure>;
}

/// Accepts every step; the engine feeds actuations back as resolution
/// messages.
#[derive(Debug, Default, Clone)]
pub struct MockPort {
    pub dispatched: Vec<(u64, PlanStep)>,
}

impl ActuationPort for MockPort {
    fn dispatch(&mut self, step: &PlanStep, timestamp: u64) -> Result<(), ActuationFailure> {
        self.dispatched.push((timestamp, step.clone()));
        Ok(())
    }
}

/// Fails the n-th dispatch (0-based) and accepts the others.
#[derive(Debug, Clone)]
pub struct FailingPort {
    pub fail_at: usize,
    pub calls: usize,
}

impl ActuationPort for FailingPort {
    fn dispatch(&mut self, step: &PlanStep, _timestamp: u64) -> Result<(), ActuationFailure> {
        let n = self.calls;
        self.calls += 1;
        if n == self.fail_at {
            Err(ActuationFailure(format!("device rejected {step:?}")))
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimerEvent {
    pub property_id: u32,
    pub timestamp: u64,
    pub timer: ActiveTimer,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub update_us: f64,
    pub identify_us: f64,
    pub resolve_us: f64,
    pub total_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionMessage {
    pub message: RuntimeMessage,
    pub changes: BTreeMap<String, String>,
}

/// Everything one input message caused.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub intercepted: bool,
    pub changes: BTreeMap<String, String>,
    pub verdicts: Vec<Verdict>,
    pub plans: Vec<ExecutedPlan>,
    pub timers: Vec<TimerEvent>,
    pub resolution_messages: Vec<ResolutionMessage>,
    /// How many of `resolution_messages` ran before the message itself was
    /// applied (plans for timers that had already expired).
    pub early_resolutions: usize,
    pub latency: Option<Latency>,
}

impl Outcome {
    pub fn violations(&self) -> impl Iterator<Item = &Verdict> {
        self.verdicts.iter().filter(|v| v.is_violation())
    }
}

#[derive(Clone)]
struct TraceMonitor {
    trigger: Formula,
    occurrence: Option<(ServiceKind, String, String)>,
    mode: TimerMode,
    horizon_ms: u64,
    condition: Formula,
    trigger_was: bool,
}

#[derive(Clone)]
struct Monitor {
    members: Vec<u32>,
    kind: PropertyKind,
    dims: StateDims,
    state: EnvState,
    accepting: HashSet<EnvState>,
    risk: HashMap<EnvState, HashMap<Label, bool>>,
    resolutions: HashMap<EnvState, Vec<Label>>,
    trace: Option<TraceMonitor>,
    timer: Option<ActiveTimer>,
}

impl Monitor {
    fn holds(&self, f: &Formula, s: &EnvState) -> bool {
        f.eval(&|a| self.dims.atom_holds(s, a).unwrap_or(false))
    }

    fn describe(&self, s: &EnvState) -> BTreeMap<String, String> {
        self.dims
            .dims()
            .iter()
            .zip(self.dims.values(s))
            .map(|(d, v)| (d.state.to_string(), v))
            .collect()
    }

    fn project_with(&self, graph: &EnvironmentGraph, overlay: &[(StateRef, usize)]) -> EnvState {
        let mut s = self.dims.project(graph);
        for (r, v) in overlay {
            if let Some(i) = self.dims.position(r) {
                s.0[i] = *v as u16;
            }
        }
        s
    }
}

#[derive(Clone)]
struct PropInfo {
    monitor: usize,
    strategy: Strategy,
}

/// Pending violation awaiting a plan.
struct Pending {
    property_id: u32,
    monitor: usize,
    offending: Option<RuntimeMessage>,
    label: Option<Label>,
    intercepted: bool,
}

#[derive(Default)]
struct Clock {
    update: u128,
    identify: u128,
    resolve: u128,
}

pub struct Engine {
    graph: EnvironmentGraph,
    monitors: Vec<Monitor>,
    props: BTreeMap<u32, PropInfo>,
    by_dim: Arc<HashMap<StateRef, Vec<(usize, usize)>>>,
    by_label: Arc<HashMap<Label, Vec<usize>>>,
    clock: Option<u64>,
    version: u64,
    pruned: HashMap<(u32, u64), HashSet<Label>>,
    port: Box<dyn ActuationPort>,
    timing: bool,
}

fn occurrence_of(f: &Formula) -> Option<(ServiceKind, String, String)> {
    match f {
        Formula::Atom(Atom::Occurs {
            kind,
            service,
            location,
        }) => Some((*kind, service.clone(), location.clone())),
        _ => None,
    }
}

/// Identical tables are monitored once and reported for every member.
fn group_key(r: &AnalysisRecord) -> String {
    let mut spec = r.trace_spec.clone();
    if let Some(s) = spec.as_mut() {
        s.property_id = 0;
    }
    serde_json::json!({
        "dims": r.dims,
        "violated": r.violated_states,
        "risk": r.violation_trans,
        "resolutions": r.resolutions,
        "trace": spec,
    })
    .to_string()
}

impl Engine {
    pub fn new(graph: EnvironmentGraph, records: &[AnalysisRecord]) -> Result<Self, RuntimeError> {
        Self::with_port(graph, records, Box::new(MockPort::default()))
    }

    pub fn with_port(
        graph: EnvironmentGraph,
        records: &[AnalysisRecord],
        port: Box<dyn ActuationPort>,
    ) -> Result<Self, RuntimeError> {
        let mut monitors: Vec<Monitor> = Vec::new();
        let mut groups: HashMap<String, usize> = HashMap::new();
        let mut props = BTreeMap::new();
        let mut sorted: Vec<&AnalysisRecord> = records.iter().collect();
        sorted.sort_by_key(|r| r.property_id);
        for r in sorted {
            if props.contains_key(&r.property_id) {
                return Err(RuntimeError::BadAnalysis(format!(
                    "duplicate property {}",
                    r.property_id
                )));
            }
            let key = group_key(r);
            let idx = match groups.get(&key) {
                Some(&i) => {
                    monitors[i].members.push(r.property_id);
                    i
                }
                None => {
                    let m = Self::build_monitor(&graph, r)?;
                    monitors.push(m);
                    groups.insert(key, monitors.len() - 1);
                    monitors.len() - 1
                }
            };
            props.insert(
                r.property_id,
                PropInfo {
                    monitor: idx,
                    strategy: r.strategy,
                },
            );
        }
        let mut by_dim: HashMap<StateRef, Vec<(usize, usize)>> = HashMap::new();
        let mut by_label: HashMap<Label, Vec<usize>> = HashMap::new();
        for (mi, m) in monitors.iter().enumerate() {
            for (di, r) in m.dims.refs().enumerate() {
                by_dim.entry(r.clone()).or_default().push((mi, di));
            }
            let labels: BTreeSet<&Label> = m.risk.values().flat_map(|t| t.keys()).collect();
            for l in labels {
                by_label.entry(l.clone()).or_default().push(mi);
            }
        }
        Ok(Engine {
            graph,
            monitors,
            props,
            by_dim: Arc::new(by_dim),
            by_label: Arc::new(by_label),
            clock: None,
            version: 0,
            pruned: HashMap::new(),
            port,
            timing: true,
        })
    }

    fn build_monitor(graph: &EnvironmentGraph, r: &AnalysisRecord) -> Result<Monitor, RuntimeError> {
        let dims = r.state_dims();
        for d in dims.dims() {
            let slot = graph
                .slot(&d.state)
                .map_err(|e| RuntimeError::BadAnalysis(format!("property {}: {e}", r.property_id)))?;
            if slot.domain != d.domain {
                return Err(RuntimeError::BadAnalysis(format!(
                    "property {}: domain of {} differs from the environment",
                    r.property_id, d.state
                )));
            }
        }
        let parse = |v: &[String]| {
            dims.parse_values(v)
                .ok_or_else(|| RuntimeError::BadAnalysis(format!("property {}: bad state {v:?}", r.property_id)))
        };
        let accepting = r.violated_states.iter().map(|s| parse(s)).collect::<Result<_, _>>()?;
        let mut risk = HashMap::new();
        for e in &r.violation_trans {
            let labels: HashMap<Label, bool> = e
                .transitions
                .iter()
                .map(|t| (t.label.clone(), t.controllable))
                .collect();
            risk.insert(parse(&e.state)?, labels);
        }
        let mut resolutions = HashMap::new();
        for e in &r.resolutions {
            resolutions.insert(parse(&e.state)?, e.actions.clone());
        }
        let trace = r.trace_spec.as_ref().map(|t| TraceMonitor {
            occurrence: occurrence_of(&t.trigger),
            trigger: t.trigger.clone(),
            mode: t.timer.mode,
            horizon_ms: t.timer.horizon * 1000,
            condition: t.condition.clone(),
            trigger_was: false,
        });
        let state = dims.project(graph);
        Ok(Monitor {
            members: vec![r.property_id],
            kind: r.kind,
            dims,
            state,
            accepting,
            risk,
            resolutions,
            trace,
            timer: None,
        })
    }

    /// Independent copy of the engine state with a fresh mock port, for
    /// trying messages without committing them.
    pub fn fork(&self) -> Engine {
        Engine {
            graph: self.graph.clone(),
            monitors: self.monitors.clone(),
            props: self.props.clone(),
            by_dim: self.by_dim.clone(),
            by_label: self.by_label.clone(),
            clock: self.clock,
            version: self.version,
            pruned: HashMap::new(),
            port: Box::new(MockPort::default()),
            timing: false,
        }
    }

    pub fn clock(&self) -> Option<u64> {
        self.clock
    }

    /// Dimensions of a property's tables.
    pub fn property_dims(&self, property_id: u32) -> Option<Vec<StateRef>> {
        let m = &self.monitors[self.props.get(&property_id)?.monitor];
        Some(m.dims.refs().cloned().collect())
    }

    /// Current projection of a property's dimensions as value indices.
    pub fn property_state(&self, property_id: u32) -> Option<EnvState> {
        Some(self.monitors[self.props.get(&property_id)?.monitor].state.clone())
    }

    /// Turns latency measurement on or off. Reports without latency are
    /// byte-identical across runs.
    pub fn set_timing(&mut self, on: bool) {
        self.timing = on;
    }

    pub fn graph(&self) -> &EnvironmentGraph {
        &self.graph
    }

    pub fn property_ids(&self) -> Vec<u32> {
        self.props.keys().copied().collect()
    }

    /// Whether the property's current projected state is violating.
    pub fn is_accepting(&self, property_id: u32) -> Option<bool> {
        let m = &self.monitors[self.props.get(&property_id)?.monitor];
        Some(m.accepting.contains(&m.state))
    }

    pub fn running_timers(&self) -> Vec<ActiveTimer> {
        let mut out = Vec::new();
        for m in &self.monitors {
            if let Some(t) = &m.timer {
                for id in &m.members {
                    out.push(ActiveTimer {
                        property_id: *id,
                        ..t.clone()
                    });
                }
            }
        }
        out.sort_by_key(|t| t.property_id);
        out
    }

    /// State Checker: properties for which `label` leads from the current
    /// risk state into a violated state. Running G-timers are checked the
    /// same way against their condition tables.
    pub fn check_state(&self, label: &Label) -> Vec<(u32, VerdictKind, bool)> {
        let mut out = Vec::new();
        let Some(candidates) = self.by_label.get(label) else {
            return out;
        };
        for &mi in candidates {
            let m = &self.monitors[mi];
            let kind = match m.kind {
                PropertyKind::Spatial => VerdictKind::SpatialViolation,
                PropertyKind::Temporal => match &m.timer {
                    Some(t) if t.mode == TimerMode::G => VerdictKind::TemporalViolation,
                    _ => continue,
                },
            };
            if let Some(&controllable) = m.risk.get(&m.state).and_then(|t| t.get(label)) {
                for id in &m.members {
                    out.push((*id, kind, !controllable));
                }
            }
        }
        out.sort_by_key(|x| x.0);
        out
    }

    fn apply_label(&mut self, label: &Label) -> Result<BTreeMap<String, String>, RuntimeError> {
        let changed = match label {
            Label::Event {
                event_type,
                location,
                payload,
            } => self.graph.apply_event(event_type, location, payload)?,
            Label::Action { action_type, location } => self.graph.apply_action(action_type, location)?,
        };
        let mut out = BTreeMap::new();
        for r in changed {
            let v = self.graph.value_index(&r).unwrap_or(0);
            if let Some(slots) = self.by_dim.get(&r) {
                for &(mi, di) in slots {
                    self.monitors[mi].state.0[di] = v as u16;
                }
            }
            out.insert(
                r.to_string(),
                self.graph.query_state(&r).unwrap_or_default().to_string(),
            );
        }
        if !out.is_empty() {
            self.version += 1;
        }
        Ok(out)
    }

    fn timer_event(&self, mi: usize, timestamp: u64, timer: &ActiveTimer, out: &mut Outcome) {
        for id in &self.monitors[mi].members {
            out.timers.push(TimerEvent {
                property_id: *id,
                timestamp,
                timer: ActiveTimer {
                    property_id: *id,
                    ..timer.clone()
                },
            });
        }
    }

    fn temporal_verdicts(
        &self,
        mi: usize,
        timestamp: u64,
        offending: Offending,
        uncontrollable: bool,
        out: &mut Outcome,
    ) -> Vec<u32> {
        let m = &self.monitors[mi];
        for id in &m.members {
            let offending = match &offending {
                Offending::Timer { timer } => Offending::Timer {
                    timer: ActiveTimer {
                        property_id: *id,
                        ..timer.clone()
                    },
                },
                other => other.clone(),
            };
            out.verdicts.push(Verdict {
                property_id: Some(*id),
                kind: VerdictKind::TemporalViolation,
                timestamp,
                offending: Some(offending),
                env_state: m.describe(&m.state),
                uncontrollable,
            });
        }
        m.members.clone()
    }

    /// Ends timers whose deadline is before `now` (or at `now` when
    /// `inclusive`). Returns monitors with an expired F-timer.
    fn expire(&mut self, now: u64, inclusive: bool, out: &mut Outcome) -> Vec<usize> {
        let mut violated = Vec::new();
        for mi in 0..self.monitors.len() {
            let Some(t) = self.monitors[mi].timer.clone() else {
                continue;
            };
            if t.deadline > now || (!inclusive && t.deadline == now) {
                continue;
            }
            self.monitors[mi].timer = None;
            let status = match t.mode {
                TimerMode::F => TimerStatus::Violated,
                TimerMode::G => TimerStatus::Satisfied,
            };
            let ended = ActiveTimer { status, ..t };
            self.timer_event(mi, ended.deadline, &ended, out);
            if status == TimerStatus::Violated {
                self.temporal_verdicts(mi, ended.deadline, Offending::Timer { timer: ended.clone() }, true, out);
                violated.push(mi);
            }
        }
        violated
    }

    /// Trace Checker after a state update at `now`. Returns monitors whose
    /// G-timer condition failed.
    fn check_traces(&mut self, now: u64, label: Option<&Label>, out: &mut Outcome) -> Vec<usize> {
        let mut violated = Vec::new();
        for mi in 0..self.monitors.len() {
            let Some(tm) = &self.monitors[mi].trace else { continue };
            let m = &self.monitors[mi];
            let cond = m.holds(&tm.condition, &m.state);
            let trig = match &tm.occurrence {
                Some((kind, service, loc)) => label.is_some_and(|l| l.matches_occurrence(*kind, service, loc)),
                None => m.holds(&tm.trigger, &m.state),
            };
            let state_trigger = tm.occurrence.is_none();
            let rising = if state_trigger { trig && !tm.trigger_was } else { trig };
            let mode = tm.mode;
            let horizon = tm.horizon_ms;
            if let Some(t) = self.monitors[mi].timer.clone() {
                let ended = match mode {
                    TimerMode::F if cond => Some(TimerStatus::Satisfied),
                    TimerMode::G if !cond => Some(TimerStatus::Violated),
                    _ if state_trigger && !trig => Some(TimerStatus::Disarmed),
                    _ => None,
                };
                if let Some(status) = ended {
                    self.monitors[mi].timer = None;
                    let ended = ActiveTimer { status, ..t };
                    self.timer_event(mi, now, &ended, out);
                    if status == TimerStatus::Violated {
                        violated.push(mi);
                    }
                }
            }
            if self.monitors[mi].timer.is_none() && rising {
                let armed = ActiveTimer {
                    property_id: self.monitors[mi].members[0],
                    armed_at: now,
                    deadline: now + horizon,
                    mode,
                    status: TimerStatus::Armed,
                };
                self.timer_event(mi, now, &armed, out);
                let immediate = match mode {
                    TimerMode::F if cond => Some(TimerStatus::Satisfied),
                    TimerMode::G if !cond => Some(TimerStatus::Violated),
                    _ => None,
                };
                match immediate {
                    Some(status) => {
                        let ended = ActiveTimer { status, ..armed };
                        self.timer_event(mi, now, &ended, out);
                        if status == TimerStatus::Violated {
                            violated.push(mi);
                        }
                    }
                    None => {
                        self.monitors[mi].timer = Some(ActiveTimer {
                            status: TimerStatus::Running,
                            ..armed
                        })
                    }
                }
            }
            if state_trigger {
                if let Some(tm) = self.monitors[mi].trace.as_mut() {
                    tm.trigger_was = trig;
                }
            }
        }
        violated
    }

    /// Processes one input message.
    pub fn ingest(&mut self, m: &RuntimeMessage) -> Result<Outcome, RuntimeError> {
        if let Some(clock) = self.clock {
            if m.timestamp < clock {
                return Err(RuntimeError::ClockRegression {
                    clock,
                    timestamp: m.timestamp,
                });
            }
        }
        let label = message_label(&self.graph, m)?;
        self.clock = Some(m.timestamp);
        let now = m.timestamp;
        let mut out = Outcome::default();
        let mut clk = Clock::default();
        let mut mark = Instant::now();
        let lap = |slot: &mut u128, mark: &mut Instant| {
            let t = Instant::now();
            *slot += t.duration_since(*mark).as_nanos();
            *mark = t;
        };

        // Deadlines strictly before this message.
        let expired = self.expire(now, false, &mut out);
        lap(&mut clk.identify, &mut mark);
        let mut pending: Vec<Pending> = Vec::new();
        for mi in expired {
            self.push_pending(mi, None, None, false, &mut pending);
        }
        self.run_plans(now, std::mem::take(&mut pending), &mut out)?;
        out.early_resolutions = out.resolution_messages.len();
        lap(&mut clk.resolve, &mut mark);

        if let Some(label) = &label {
            let would = self.check_state(label);
            let intercept = m.is_interceptable()
                && would
                    .iter()
                    .any(|(id, _, _)| self.props.get(id).is_some_and(|p| p.strategy.intercepts()));
            lap(&mut clk.identify, &mut mark);
            if !intercept {
                out.changes = self.apply_label(label)?;
            }
            out.intercepted = intercept;
            lap(&mut clk.update, &mut mark);

            for (id, kind, uncontrollable) in &would {
                if *kind == VerdictKind::TemporalViolation && !intercept {
                    // Reported by the trace check below.
                    continue;
                }
                let mi = self.props[id].monitor;
                let mon = &self.monitors[mi];
                out.verdicts.push(Verdict {
                    property_id: Some(*id),
                    kind: *kind,
                    timestamp: now,
                    offending: Some(Offending::Message { message: m.clone() }),
                    env_state: mon.describe(&mon.state),
                    uncontrollable: *uncontrollable,
                });
                pending.push(Pending {
                    property_id: *id,
                    monitor: mi,
                    offending: Some(m.clone()),
                    label: Some(label.clone()),
                    intercepted: intercept,
                });
            }
            let applied = if intercept { None } else { Some(label) };
            let g_violations = self.check_traces(now, applied, &mut out);
            for mi in g_violations {
                let uncontrollable = !label.controllable();
                let ids = self.temporal_verdicts(
                    mi,
                    now,
                    Offending::Message { message: m.clone() },
                    uncontrollable,
                    &mut out,
                );
                for id in ids {
                    pending.push(Pending {
                        property_id: id,
                        monitor: mi,
                        offending: Some(m.clone()),
                        label: Some(label.clone()),
                        intercepted: false,
                    });
                }
            }
        }
        let expired = self.expire(now, true, &mut out);
        for mi in expired {
            self.push_pending(mi, None, None, false, &mut pending);
        }
        lap(&mut clk.identify, &mut mark);

        pending.sort_by_key(|p| p.property_id);
        if m.source != Some(Source::Resolution) {
            self.run_plans(now, pending, &mut out)?;
        }
        lap(&mut clk.resolve, &mut mark);

        if !out.verdicts.iter().any(Verdict::is_violation) {
            out.verdicts.push(Verdict {
                property_id: None,
                kind: VerdictKind::Ok,
                timestamp: now,
                offending: None,
                env_state: BTreeMap::new(),
                uncontrollable: false,
            });
        }
        if self.timing {
            let us = |ns: u128| (ns as f64 / 1000.0 * 1000.0).round() / 1000.0;
            let (u, i, r) = (us(clk.update), us(clk.identify), us(clk.resolve));
            out.latency = Some(Latency {
                update_us: u,
                identify_us: i,
                resolve_us: r,
                total_us: ((u + i + r) * 1000.0).round() / 1000.0,
            });
        }
        Ok(out)
    }

    fn push_pending(
        &self,
        mi: usize,
        offending: Option<RuntimeMessage>,
        label: Option<Label>,
        intercepted: bool,
        pending: &mut Vec<Pending>,
    ) {
        for id in &self.monitors[mi].members {
            pending.push(Pending {
                property_id: *id,
                monitor: mi,
                offending: offending.clone(),
                label: label.clone(),
                intercepted,
            });
        }
    }

    fn run_plans(&mut self, now: u64, mut pending: Vec<Pending>, out: &mut Outcome) -> Result<(), RuntimeError> {
        pending.sort_by_key(|p| p.property_id);
        for p in pending {
            let plan = self.plan(&p);
            let executed = self.execute(plan, now, out)?;
            out.plans.push(executed);
        }
        Ok(())
    }

    /// Whether `candidate` may be executed now: it must change something,
    /// must not be a violation transition of any property, must not move a
    /// spatial property into its violated region, and must keep running
    /// G-timer conditions true. With `clear`, the target monitor must end
    /// outside its violated region.
    fn compatible(&self, candidate: &Label, target: usize, clear: bool) -> bool {
        let Label::Action { action_type, location } = candidate else {
            return false;
        };
        let Ok(action) = self.graph.find_action(action_type, location) else {
            return false;
        };
        let overlay = action.updates(&self.graph, |r| self.graph.value_index(r));
        if overlay.iter().all(|(r, v)| self.graph.value_index(r) == Some(*v)) {
            return false;
        }
        for (mi, m) in self.monitors.iter().enumerate() {
            let touched = overlay.iter().any(|(r, _)| m.dims.position(r).is_some());
            if !touched {
                if mi == target && clear && m.accepting.contains(&m.state) {
                    return false;
                }
                continue;
            }
            let after = m.project_with(&self.graph, &overlay);
            match m.kind {
                PropertyKind::Spatial => {
                    if m.risk.get(&m.state).is_some_and(|t| t.contains_key(candidate)) {
                        return false;
                    }
                    if !m.accepting.contains(&m.state) && m.accepting.contains(&after) {
                        return false;
                    }
                }
                PropertyKind::Temporal => {
                    if let (Some(t), Some(tm)) = (&m.timer, &m.trace) {
                        if t.mode == TimerMode::G && !m.holds(&tm.condition, &after) {
                            return false;
                        }
                    }
                }
            }
            if mi == target && clear && m.accepting.contains(&after) {
                return false;
            }
        }
        true
    }

    /// First compatible candidate, pruning the rest for this property and
    /// environment version.
    fn pick(&mut self, property_id: u32, target: usize, candidates: &[Label], clear: bool) -> Option<Label> {
        let key = (property_id, self.version);
        for c in candidates {
            if self.pruned.get(&key).is_some_and(|s| s.contains(c)) {
                continue;
            }
            if self.compatible(c, target, clear) {
                return Some(c.clone());
            }
            self.pruned.entry(key).or_default().insert(c.clone());
        }
        None
    }

    fn modify_candidates(&self, mi: usize) -> Vec<Label> {
        let m = &self.monitors[mi];
        m.resolutions.get(&m.state).cloned().unwrap_or_default()
    }

    fn inverse_of(&self, label: &Label) -> Option<Label> {
        let Label::Action { action_type, location } = label else {
            return None;
        };
        let a = self.graph.find_action(action_type, location).ok()?;
        let inv = a.inverse.as_ref()?;
        self.graph.find_action(inv, location).ok()?;
        Some(Label::Action {
            action_type: inv.clone(),
            location: location.clone(),
        })
    }

    /// Other providers of each effect of `label`, by effect.
    fn replacement_candidates(&self, label: &Label) -> Vec<Vec<Label>> {
        let Label::Action { action_type, location } = label else {
            return Vec::new();
        };
        let Ok(offending) = self.graph.find_action(action_type, location) else {
            return Vec::new();
        };
        let devices: BTreeSet<StateRef> = offending.device_refs().collect();
        offending
            .effects
            .iter()
            .map(|e| {
                let mut c: Vec<Label> = self
                    .graph
                    .actions
                    .iter()
                    .filter(|a| !a.device_refs().any(|r| devices.contains(&r)))
                    .filter(|a| {
                        a.effects.iter().any(|x| {
                            x.affected_space == e.affected_space && x.state_name == e.state_name && x.effect == e.effect
                        })
                    })
                    .map(|a| Label::Action {
                        action_type: a.action_type.clone(),
                        location: a.location.clone(),
                    })
                    .collect();
                c.sort();
                c.dedup();
                c
            })
            .collect()
    }

    fn modify_steps(&mut self, p: &Pending, steps: &mut Vec<PlanStep>) {
        let m = &self.monitors[p.monitor];
        if !m.accepting.contains(&m.state) {
            if p.offending.is_some() && !p.intercepted && m.kind == PropertyKind::Spatial {
                // Violated by an occurrence rather than a state.
                steps.push(PlanStep::Notify {
                    reason: "violation is not a state; nothing to modify".into(),
                });
            }
            return;
        }
        let candidates = self.modify_candidates(p.monitor);
        match self.pick(p.property_id, p.monitor, &candidates, true) {
            Some(label) => steps.push(PlanStep::Modify { label }),
            None => steps.push(PlanStep::Notify {
                reason: if candidates.is_empty() {
                    "no controllable action leaves the violated state".into()
                } else {
                    "every resolution action conflicts with another property".into()
                },
            }),
        }
    }

    /// Plan for a violation verdict against the current environment,
    /// without executing it. The offending action is taken as applied.
    pub fn resolve(&mut self, verdict: &Verdict) -> Option<ResolutionPlan> {
        let id = verdict.property_id?;
        if !verdict.is_violation() {
            return None;
        }
        let monitor = self.props.get(&id)?.monitor;
        let (offending, label) = match &verdict.offending {
            Some(Offending::Message { message }) => (
                Some(message.clone()),
                message_label(&self.graph, message).ok().flatten(),
            ),
            _ => (None, None),
        };
        Some(self.plan(&Pending {
            property_id: id,
            monitor,
            offending,
            label,
            intercepted: false,
        }))
    }

    /// Builds the plan for one violation. Each chosen actuation is
    /// simulated before the next step is chosen.
    fn plan(&mut self, p: &Pending) -> ResolutionPlan {
        let strategy = self.props[&p.property_id].strategy;
        let mut steps = Vec::new();
        if p.intercepted {
            let label = p.label.clone().expect("intercepted message has a label");
            steps.push(PlanStep::Intercept { label: label.clone() });
            if strategy == Strategy::InterceptAndReplace {
                self.replace_steps(p, &label, &mut steps);
            }
            return ResolutionPlan {
                property_id: p.property_id,
                strategy,
                steps,
            };
        }
        match strategy {
            Strategy::NotifyOnly => steps.push(PlanStep::Notify {
                reason: "notify-only strategy".into(),
            }),
            Strategy::ModifyState => self.modify_steps(p, &mut steps),
            Strategy::InterceptOrRevoke | Strategy::InterceptAndReplace => {
                let revoked = match &p.label {
                    Some(l) if l.controllable() => self
                        .inverse_of(l)
                        .filter(|inv| self.compatible(inv, p.monitor, false))
                        .inspect(|inv| steps.push(PlanStep::Revoke { label: inv.clone() })),
                    _ => None,
                };
                match revoked {
                    Some(inv) => {
                        if strategy == Strategy::InterceptAndReplace {
                            let offending = p.label.clone().expect("revoked action has a label");
                            // Plan replacements on the environment after the revoke.
                            let saved = self.graph.clone();
                            let saved_states: Vec<EnvState> = self.monitors.iter().map(|m| m.state.clone()).collect();
                            let _ = self.apply_label(&inv);
                            self.replace_steps(p, &offending, &mut steps);
                            self.graph = saved;
                            for (m, s) in self.monitors.iter_mut().zip(saved_states) {
                                m.state = s;
                            }
                            self.version += 1;
                        }
                    }
                    None => self.modify_steps(p, &mut steps),
                }
            }
        }
        ResolutionPlan {
            property_id: p.property_id,
            strategy,
            steps,
        }
    }

    fn replace_steps(&mut self, p: &Pending, offending: &Label, steps: &mut Vec<PlanStep>) {
        let per_effect = self.replacement_candidates(offending);
        if per_effect.is_empty() {
            return;
        }
        let saved = self.graph.clone();
        let saved_states: Vec<EnvState> = self.monitors.iter().map(|m| m.state.clone()).collect();
        let mut chosen: Vec<Label> = Vec::new();
        let mut missing = 0;
        for candidates in per_effect {
            if candidates.iter().any(|c| chosen.contains(c)) {
                continue;
            }
            match self.pick(p.property_id, p.monitor, &candidates, false) {
                Some(c) => {
                    let _ = self.apply_label(&c);
                    chosen.push(c);
                }
                None => missing += 1,
            }
        }
        self.graph = saved;
        for (m, s) in self.monitors.iter_mut().zip(saved_states) {
            m.state = s;
        }
        self.version += 1;
        for label in chosen {
            steps.push(PlanStep::Replace { label });
        }
        if missing > 0 {
            steps.push(PlanStep::Notify {
                reason: format!("no compatible replacement for {missing} effect(s) of {offending}"),
            });
        }
    }

    /// Sends each step through the port. Successful actuations re-enter the
    /// engine as resolution messages; a failure skips the rest and notifies.
    fn execute(&mut self, plan: ResolutionPlan, now: u64, out: &mut Outcome) -> Result<ExecutedPlan, RuntimeError> {
        let mut acks = Vec::new();
        let mut notification = None;
        for (i, step) in plan.steps.iter().enumerate() {
            match self.port.dispatch(step, now) {
                Ok(()) => {
                    acks.push(Ack {
                        step: i,
                        ok: true,
                        error: None,
                    });
                    if let Some(label) = step.actuation() {
                        let label = label.clone();
                        let changes = self.apply_label(&label)?;
                        let message = RuntimeMessage::from_label(now, &label);
                        out.resolution_messages.push(ResolutionMessage { message, changes });
                        // Loop guard: verdicts raised here do not spawn plans.
                        let violated = self.check_traces(now, Some(&label), out);
                        for mi in violated {
                            self.temporal_verdicts(
                                mi,
                                now,
                                Offending::Message {
                                    message: RuntimeMessage::from_label(now, &label),
                                },
                                false,
                                out,
                            );
                        }
                    }
                }
                Err(e) => {
                    acks.push(Ack {
                        step: i,
                        ok: false,
                        error: Some(e.0.clone()),
                    });
                    notification = Some(format!("step {i} failed ({}); manual intervention needed", e.0));
                    break;
                }
            }
        }
        Ok(ExecutedPlan {
            plan,
            acks,
            notification,
        })
    }
}

/// One line of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ReportRecord {
    Message {
        index: usize,
        timestamp: u64,
        message: RuntimeMessage,
        intercepted: bool,
        changes: BTreeMap<String, String>,
        violations: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        latency: Option<Latency>,
    },
    Verdict {
        index: usize,
        verdict: Verdict,
    },
    Plan {
        index: usize,
        timestamp: u64,
        plan: ExecutedPlan,
    },
    Timer {
        index: usize,
        event: TimerEvent,
    },
    Resolution {
        index: usize,
        message: RuntimeMessage,
        changes: BTreeMap<String, String>,
    },
}

impl ReportRecord {
    pub fn to_line(&self) -> String {
        let value = serde_json::to_value(self).expect("record serializes");
        serde_json::to_string(&value).expect("value serializes")
    }
}

/// Report lines for one processed message.
pub fn report_records(index: usize, m: &RuntimeMessage, o: &Outcome) -> Vec<ReportRecord> {
    let mut out = vec![ReportRecord::Message {
        index,
        timestamp: m.timestamp,
        message: m.clone(),
        intercepted: o.intercepted,
        changes: o.changes.clone(),
        violations: o.violations().count(),
        latency: o.latency,
    }];
    for t in &o.timers {
        out.push(ReportRecord::Timer {
            index,
            event: t.clone(),
        });
    }
    for v in o.violations() {
        out.push(ReportRecord::Verdict {
            index,
            verdict: v.clone(),
        });
    }
    for p in &o.plans {
        out.push(ReportRecord::Plan {
            index,
            timestamp: m.timestamp,
            plan: p.clone(),
        });
    }
    for r in &o.resolution_messages {
        out.push(ReportRecord::Resolution {
            index,
            message: r.message.clone(),
            changes: r.changes.clone(),
        });
    }
    out
}

/// Parses a trace log; header lines (objects with a `header` key) and blank
/// lines are skipped.
pub fn parse_trace(text: &str) -> Result<Vec<RuntimeMessage>, RuntimeError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| RuntimeError::BadTrace {
            line: i + 1,
            message: e.to_string(),
        })?;
        if value.get("header").is_some() {
            continue;
        }
        out.push(serde_json::from_value(value).map_err(|e| RuntimeError::BadTrace {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Stable reorder of equal-timestamp runs: events, then actions, then ticks.
/// Returns the input indices in processing order.
pub fn processing_order(messages: &[RuntimeMessage]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..messages.len()).collect();
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && messages[end].timestamp == messages[start].timestamp {
            end += 1;
        }
        idx[start..end].sort_by_key(|&i| messages[i].kind);
        start = end;
    }
    idx
}

/// Replays a whole trace and returns the report lines.
pub fn replay(engine: &mut Engine, messages: &[RuntimeMessage]) -> Result<Vec<String>, RuntimeError> {
    let mut lines = Vec::new();
    for i in processing_order(messages) {
        let o = engine.ingest(&messages[i])?;
        lines.extend(report_records(i, &messages[i], &o).iter().map(ReportRecord::to_line));
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_timestamps_process_events_first() {
        let trace = vec![
            RuntimeMessage::tick(5),
            RuntimeMessage::action(5, "A_On", "L", Source::User, Phase::Observed),
            RuntimeMessage::event(5, "E_Change", "L", "x"),
            RuntimeMessage::event(7, "E_Change", "L", "y"),
            RuntimeMessage::tick(5),
        ];
        // The trailing tick at 5 follows a later timestamp and stays put.
        assert_eq!(processing_order(&trace), vec![2, 1, 0, 3, 4]);
    }

    #[test]
    fn trace_lines_round_trip() {
        let m = RuntimeMessage::action(1200, "Window_Open", "Lab", Source::Application, Phase::Proposed);
        let line = serde_json::to_string(&m).unwrap();
        assert_eq!(
            line,
            r#"{"timestamp":1200,"kind":"action","type":"Window_Open","location":"Lab","source":"application","phase":"proposed"}"#
        );
        let text = format!("{{\"header\": {{}}}}\n\n{line}\n");
        assert_eq!(parse_trace(&text).unwrap(), vec![m]);
    }

    #[test]
    fn trace_errors_carry_line_numbers() {
        let text = "{\"timestamp\": 1, \"kind\": \"tick\"}\n{\"timestamp\": 2, \"kind\": \"tock\"}\n";
        assert!(matches!(parse_trace(text), Err(RuntimeError::BadTrace { line: 2, .. })));
        let text = "{\"timestamp\": 1, \"kind\": \"tick\", \"extra\": 0}";
        assert!(matches!(parse_trace(text), Err(RuntimeError::BadTrace { line: 1, .. })));
    }

    #[test]
    fn only_proposed_non_resolution_actions_are_interceptable() {
        assert!(RuntimeMessage::action(0, "A", "L", Source::User, Phase::Proposed).is_interceptable());
        assert!(!RuntimeMessage::action(0, "A", "L", Source::User, Phase::Observed).is_interceptable());
        assert!(!RuntimeMessage::action(0, "A", "L", Source::Resolution, Phase::Proposed).is_interceptable());
        assert!(!RuntimeMessage::event(0, "E", "L", "v").is_interceptable());
        assert!(!RuntimeMessage::tick(0).is_interceptable());
    }

    #[test]
    fn failing_port_fails_once() {
        let mut port = FailingPort { fail_at: 1, calls: 0 };
        let step = PlanStep::Notify { reason: "r".into() };
        assert!(port.dispatch(&step, 0).is_ok());
        assert!(port.dispatch(&step, 0).is_err());
        assert!(port.dispatch(&step, 0).is_ok());
    }

    #[test]
    fn report_lines_are_tagged() {
        let m = RuntimeMessage::tick(10);
        let lines: Vec<String> = report_records(3, &m, &Outcome::default())
            .iter()
            .map(ReportRecord::to_line)
            .collect();
        assert_eq!(lines.len(), 1);
        let back: ReportRecord = serde_json::from_str(&lines[0]).unwrap();
        assert!(matches!(
            back,
            ReportRecord::Message {
                index: 3,
                timestamp: 10,
                violations: 0,
                ..
            }
        ));
        assert!(lines[0].starts_with(r#"{"changes":{},"index":3"#));
    }
}
