//! Synthetic trace generation with injected, labeled violations, and an
//! independent label checker.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checker::{AnalysisRecord, Label};
use crate::formula::{Atom, Formula, ServiceKind};
use crate::model::{EnvironmentGraph, StateRef};
use crate::mtl::TimerMode;
use crate::property::PropertyKind;
use crate::runtime::{Engine, MessageKind, Outcome, Phase, RuntimeError, RuntimeMessage, Source};

pub const GENERATOR: &str = "chacha8";

/// Steering searches stop after this many messages.
const MAX_STEER_DEPTH: usize = 8;
const INJECTION_RETRIES: usize = 6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("cannot inject a violation of property {property}: {reason}")]
    InfeasibleInjection { property: u32, reason: String },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    Event,
    Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rate {
    pub kind: RateKind,
    #[serde(rename = "type")]
    pub service: String,
    pub location: String,
    /// Mean seconds between occurrences.
    pub mean_interval: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    /// Seconds from the start.
    pub at: u64,
    pub event_type: String,
    pub location: String,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    pub property: u32,
    pub count: usize,
}

fn default_user_share() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    /// Seconds.
    pub duration: u64,
    pub rates: Vec<Rate>,
    /// Share of actions issued by users (observed) rather than
    /// applications (proposed).
    #[serde(default = "default_user_share")]
    pub user_share: f64,
    #[serde(default)]
    pub occupancy: Vec<ScriptEntry>,
    #[serde(default)]
    pub injections: Vec<Injection>,
}

impl Scenario {
    /// Background traffic over every event and action service, spread so
    /// that about `per_day` messages arrive each day.
    pub fn uniform(graph: &EnvironmentGraph, seed: u64, days: u64, per_day: f64) -> Scenario {
        let mut rates = Vec::new();
        let mut seen = BTreeSet::new();
        for e in &graph.events {
            if seen.insert((RateKind::Event as u8, e.event_type.clone(), e.location.clone())) {
                rates.push((RateKind::Event, e.event_type.clone(), e.location.clone()));
            }
        }
        for a in &graph.actions {
            if seen.insert((RateKind::Action as u8, a.action_type.clone(), a.location.clone())) {
                rates.push((RateKind::Action, a.action_type.clone(), a.location.clone()));
            }
        }
        let n = rates.len().max(1) as f64;
        let mean = 86_400.0 * n / per_day;
        Scenario {
            seed,
            duration: days * 86_400,
            rates: rates
                .into_iter()
                .map(|(kind, service, location)| Rate {
                    kind,
                    service,
                    location,
                    mean_interval: mean,
                })
                .collect(),
            user_share: default_user_share(),
            occupancy: Vec::new(),
            injections: Vec::new(),
        }
    }

    pub fn validate(&self, graph: &EnvironmentGraph, records: &[AnalysisRecord]) -> Result<(), SimError> {
        for r in &self.rates {
            if !(r.mean_interval.is_finite() && r.mean_interval > 0.0) {
                return Err(SimError::InvalidScenario(format!(
                    "rate for {}.{} must be positive",
                    r.location, r.service
                )));
            }
            let ok = match r.kind {
                RateKind::Event => graph.find_event(&r.service, &r.location).is_ok(),
                RateKind::Action => graph.find_action(&r.service, &r.location).is_ok(),
            };
            if !ok {
                return Err(SimError::InvalidScenario(format!(
                    "unknown service {}.{}",
                    r.location, r.service
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.user_share) {
            return Err(SimError::InvalidScenario("user_share must be within [0, 1]".into()));
        }
        for i in &self.injections {
            if !records.iter().any(|r| r.property_id == i.property) {
                return Err(SimError::InvalidScenario(format!(
                    "no analysis for property {}",
                    i.property
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub generator: String,
    pub seed: u64,
    pub duration: u64,
}

/// How the engine handled a labeled message: whether it was intercepted and
/// which resolution actions ran.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedResolution {
    pub intercepted: bool,
    /// Actions run for timers that expired before the message was applied.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub before: Vec<Label>,
    pub actions: Vec<Label>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledTrace {
    pub header: TraceHeader,
    pub messages: Vec<RuntimeMessage>,
    pub labels: BTreeMap<usize, BTreeSet<u32>>,
    pub resolutions: BTreeMap<usize, ExpectedResolution>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelFile {
    pub labels: BTreeMap<usize, BTreeSet<u32>>,
    pub resolutions: BTreeMap<usize, ExpectedResolution>,
}

impl LabeledTrace {
    /// Trace log text: a header line, then one message per line.
    pub fn trace_text(&self) -> String {
        let mut out = serde_json::json!({ "header": self.header }).to_string();
        out.push('\n');
        for m in &self.messages {
            out.push_str(&serde_json::to_string(m).expect("message serializes"));
            out.push('\n');
        }
        out
    }

    pub fn labels_text(&self) -> String {
        crate::model::canonical_json(&LabelFile {
            labels: self.labels.clone(),
            resolutions: self.resolutions.clone(),
        })
    }

    pub fn from_texts(trace: &str, labels: &str) -> Result<LabeledTrace, SimError> {
        let mut header = None;
        for line in trace.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value =
                serde_json::from_str(line).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
            if let Some(h) = v.get("header") {
                header = Some(serde_json::from_value(h.clone()).map_err(|e| SimError::InvalidScenario(e.to_string()))?);
                break;
            }
        }
        let header = header.ok_or_else(|| SimError::InvalidScenario("trace has no header".into()))?;
        let messages = crate::runtime::parse_trace(trace)?;
        let file: LabelFile = serde_json::from_str(labels).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        Ok(LabeledTrace {
            header,
            messages,
            labels: file.labels,
            resolutions: file.resolutions,
        })
    }

    pub fn violation_count(&self) -> usize {
        self.labels.values().map(BTreeSet::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Item {
    Background(usize),
    Script(usize),
    Inject(u32),
}

fn violation_ids(o: &Outcome) -> BTreeSet<u32> {
    o.violations().filter_map(|v| v.property_id).collect()
}

fn expected_resolution(o: &Outcome) -> ExpectedResolution {
    let labels: Vec<Label> = o
        .resolution_messages
        .iter()
        .filter_map(|r| label_of(&r.message))
        .collect();
    let (before, after) = labels.split_at(o.early_resolutions.min(labels.len()));
    ExpectedResolution {
        intercepted: o.intercepted,
        before: before.to_vec(),
        actions: after.to_vec(),
    }
}

fn label_of(m: &RuntimeMessage) -> Option<Label> {
    match m.kind {
        MessageKind::Event => Some(Label::Event {
            event_type: m.service.clone(),
            location: m.location.clone(),
            payload: m.payload.clone().unwrap_or_default(),
        }),
        MessageKind::Action => Some(Label::Action {
            action_type: m.service.clone(),
            location: m.location.clone(),
        }),
        MessageKind::Tick => None,
    }
}

fn running_f(engine: &Engine) -> Vec<(u32, u64)> {
    engine
        .running_timers()
        .into_iter()
        .filter(|t| t.mode == TimerMode::F)
        .map(|t| (t.property_id, t.deadline))
        .collect()
}

fn action_message(rng: &mut ChaCha8Rng, user_share: f64, t: u64, action_type: &str, location: &str) -> RuntimeMessage {
    let (source, phase) = if rng.random::<f64>() < user_share {
        (Source::User, Phase::Observed)
    } else {
        (Source::Application, Phase::Proposed)
    };
    RuntimeMessage::action(t, action_type, location, source, phase)
}

/// Messages touching the given state references, in a random order.
fn candidates(
    graph: &EnvironmentGraph,
    engine: &Engine,
    rng: &mut ChaCha8Rng,
    user_share: f64,
    t: u64,
    refs: &BTreeSet<StateRef>,
) -> Vec<RuntimeMessage> {
    let mut out = Vec::new();
    for e in &graph.events {
        let r = StateRef::space(&e.location, &e.target_state);
        if !refs.contains(&r) {
            continue;
        }
        let current = engine.graph().query_state(&r).unwrap_or_default();
        if let Ok(slot) = graph.slot(&r) {
            for v in slot.domain.iter().filter(|v| *v != current) {
                out.push(RuntimeMessage::event(t, &e.event_type, &e.location, v));
            }
        }
    }
    let mut seen = BTreeSet::new();
    for a in &graph.actions {
        let touches = a
            .device_refs()
            .chain(a.effects.iter().map(|e| e.target()))
            .any(|r| refs.contains(&r));
        if touches
            && seen.insert((a.action_type.as_str(), a.location.as_str()))
            && graph.find_action(&a.action_type, &a.location).is_ok()
        {
            out.push(action_message(rng, user_share, t, &a.action_type, &a.location));
        }
    }
    out.shuffle(rng);
    out
}

/// A message ending property `id`'s running timer without verdicts and
/// without arming new F-timers.
fn satisfier(
    graph: &EnvironmentGraph,
    engine: &Engine,
    rng: &mut ChaCha8Rng,
    user_share: f64,
    id: u32,
    t: u64,
) -> Option<RuntimeMessage> {
    let refs: BTreeSet<StateRef> = engine.property_dims(id)?.into_iter().collect();
    let before: BTreeSet<u32> = running_f(engine).into_iter().map(|x| x.0).collect();
    candidates(graph, engine, rng, user_share, t, &refs)
        .into_iter()
        .find(|m| {
            let mut fork = engine.fork();
            let Ok(o) = fork.ingest(m) else { return false };
            let after = running_f(&fork);
            o.violations().next().is_none()
                && !after.iter().any(|(p, _)| *p == id)
                && after.iter().all(|(p, _)| before.contains(p))
        })
}

/// A message is safe when it raises no verdict and every F-timer it arms
/// can still be satisfied safely.
fn safe(graph: &EnvironmentGraph, engine: &Engine, rng: &mut ChaCha8Rng, user_share: f64, m: &RuntimeMessage) -> bool {
    let mut fork = engine.fork();
    let before: BTreeSet<u32> = running_f(engine).into_iter().map(|x| x.0).collect();
    let Ok(o) = fork.ingest(m) else { return false };
    if o.violations().next().is_some() {
        return false;
    }
    running_f(&fork)
        .into_iter()
        .filter(|(id, _)| !before.contains(id))
        .all(|(id, _)| satisfier(graph, &fork, rng, user_share, id, m.timestamp).is_some())
}

struct Generator<'a> {
    graph: &'a EnvironmentGraph,
    records: &'a [AnalysisRecord],
    engine: Engine,
    rng: ChaCha8Rng,
    user_share: f64,
    messages: Vec<RuntimeMessage>,
    labels: BTreeMap<usize, BTreeSet<u32>>,
    resolutions: BTreeMap<usize, ExpectedResolution>,
    last: u64,
}

impl<'a> Generator<'a> {
    /// Earliest timestamp for the next message. Timestamps strictly
    /// increase, so replay's reordering of equal timestamps never applies.
    fn floor(&self) -> u64 {
        if self.messages.is_empty() {
            0
        } else {
            self.last + 1
        }
    }

    fn emit(&mut self, m: RuntimeMessage) -> Result<Outcome, SimError> {
        debug_assert!(m.timestamp >= self.floor());
        let o = self.engine.ingest(&m)?;
        self.last = m.timestamp;
        let ids = violation_ids(&o);
        let idx = self.messages.len();
        if !ids.is_empty() {
            self.labels.insert(idx, ids);
            self.resolutions.insert(idx, expected_resolution(&o));
        }
        self.messages.push(m);
        Ok(o)
    }

    fn action_message(&mut self, t: u64, action_type: &str, location: &str) -> RuntimeMessage {
        action_message(&mut self.rng, self.user_share, t, action_type, location)
    }

    /// Satisfies every running F-timer due by `until` (all of them when
    /// `until` is `None`).
    fn maintain(&mut self, until: Option<u64>) -> Result<(), SimError> {
        loop {
            let mut due: Vec<(u32, u64)> = running_f(&self.engine)
                .into_iter()
                .filter(|(_, d)| until.is_none_or(|u| *d <= u))
                .collect();
            due.sort_by_key(|x| (x.1, x.0));
            let Some(&(id, deadline)) = due.first() else {
                return Ok(());
            };
            let floor = self.floor();
            let t = floor.max(deadline.saturating_sub(1000)).min(deadline).max(floor);
            let t = if until.is_none() { floor } else { t };
            match satisfier(self.graph, &self.engine, &mut self.rng, self.user_share, id, t) {
                Some(m) => {
                    self.emit(m)?;
                }
                None => {
                    // Nothing safe ends this timer; let it run out and keep
                    // the resulting verdict as ground truth.
                    return Ok(());
                }
            }
        }
    }

    /// Breadth-first search over safe messages for a sequence whose last
    /// message violates exactly `id`.
    fn find_injection(&mut self, id: u32, start: u64) -> Option<Vec<RuntimeMessage>> {
        let record = self.records.iter().find(|r| r.property_id == id)?;
        let mut refs: BTreeSet<StateRef> = record.dims.iter().map(|d| d.state.clone()).collect();
        if let Some(spec) = &record.trace_spec {
            if let Some(Atom::Occurs {
                kind: ServiceKind::Action,
                service,
                location,
            }) = spec.occurrence_trigger()
            {
                if let Ok(a) = self.graph.find_action(service, location) {
                    refs.extend(a.device_refs());
                }
            }
        }
        // Properties sharing a dimension may block the way; steer their
        // dimensions too.
        let own = refs.clone();
        for r in self.records {
            if r.dims.iter().any(|d| own.contains(&d.state)) {
                refs.extend(r.dims.iter().map(|d| d.state.clone()));
            }
        }
        let order: Vec<StateRef> = refs.iter().cloned().collect();
        let start_engine = self.engine.fork();
        let mut queue: VecDeque<(Engine, Vec<RuntimeMessage>, u64)> = VecDeque::new();
        let mut visited: HashSet<(Vec<String>, bool)> = HashSet::new();
        let key = |e: &Engine| {
            (
                project(e.graph(), &order),
                e.running_timers().iter().any(|t| t.property_id == id),
            )
        };
        visited.insert(key(&start_engine));
        queue.push_back((start_engine, Vec::new(), start));
        while let Some((engine, path, t)) = queue.pop_front() {
            if path.len() >= MAX_STEER_DEPTH {
                continue;
            }
            let mut cands = candidates(self.graph, &engine, &mut self.rng, self.user_share, t, &refs);
            if let Some(timer) = engine
                .running_timers()
                .into_iter()
                .find(|x| x.property_id == id && x.mode == TimerMode::F)
            {
                cands.insert(0, RuntimeMessage::tick(timer.deadline));
            }
            for m in cands {
                let mut fork = engine.fork();
                let Ok(o) = fork.ingest(&m) else { continue };
                let ids = violation_ids(&o);
                if ids == BTreeSet::from([id]) && !o.verdicts.iter().any(|v| v.timestamp < m.timestamp) {
                    let mut path = path.clone();
                    path.push(m);
                    return Some(path);
                }
                if !ids.is_empty() || m.kind == MessageKind::Tick {
                    continue;
                }
                let others_running = running_f(&fork).iter().any(|(p, _)| *p != id);
                if others_running {
                    continue;
                }
                if visited.insert(key(&fork)) {
                    let mut path = path.clone();
                    let next_t = m.timestamp + 1000;
                    path.push(m);
                    queue.push_back((fork, path, next_t));
                }
            }
        }
        None
    }

    fn inject(&mut self, id: u32, t: u64) -> Result<bool, SimError> {
        self.maintain(None)?;
        let start = self.floor().max(t);
        let Some(path) = self.find_injection(id, start) else {
            return Ok(false);
        };
        let n = path.len();
        for (i, m) in path.into_iter().enumerate() {
            let o = self.emit(m)?;
            let ids = violation_ids(&o);
            let expect: BTreeSet<u32> = if i + 1 == n {
                BTreeSet::from([id])
            } else {
                BTreeSet::new()
            };
            debug_assert_eq!(ids, expect);
        }
        Ok(true)
    }

    fn background(&mut self, rate: &Rate, t: u64) -> Result<(), SimError> {
        let m = match rate.kind {
            RateKind::Event => {
                let Ok(ev) = self.graph.find_event(&rate.service, &rate.location) else {
                    return Ok(());
                };
                let r = StateRef::space(&ev.location, &ev.target_state);
                let current = self.engine.graph().query_state(&r).unwrap_or_default().to_string();
                let Ok(slot) = self.graph.slot(&r) else { return Ok(()) };
                let choices: Vec<&String> = slot.domain.iter().filter(|v| **v != current).collect();
                let Some(v) = choices.get(self.rng.random_range(0..choices.len().max(1))) else {
                    return Ok(());
                };
                RuntimeMessage::event(t, &rate.service, &rate.location, v)
            }
            RateKind::Action => self.action_message(t, &rate.service, &rate.location),
        };
        if safe(self.graph, &self.engine, &mut self.rng, self.user_share, &m) {
            self.emit(m)?;
        }
        Ok(())
    }
}

/// Generates a labeled trace. Background messages are kept only when they
/// raise no verdict; each injection steers the environment into a risk
/// state and then emits the violating message.
pub fn generate_trace(
    graph: &EnvironmentGraph,
    records: &[AnalysisRecord],
    scenario: &Scenario,
) -> Result<LabeledTrace, SimError> {
    scenario.validate(graph, records)?;
    let mut engine = Engine::new(graph.clone(), records)?;
    engine.set_timing(false);
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let duration_ms = scenario.duration * 1000;

    let mut schedule: Vec<(u64, usize, Item)> = Vec::new();
    for (i, r) in scenario.rates.iter().enumerate() {
        let exp = Exp::new(1.0 / r.mean_interval).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        let mut t = 0.0f64;
        loop {
            t += exp.sample(&mut rng);
            let ms = (t * 1000.0) as u64;
            if ms >= duration_ms {
                break;
            }
            schedule.push((ms, schedule.len(), Item::Background(i)));
        }
    }
    for (i, s) in scenario.occupancy.iter().enumerate() {
        schedule.push((s.at * 1000, schedule.len(), Item::Script(i)));
    }
    for inj in &scenario.injections {
        for _ in 0..inj.count {
            let lo = duration_ms / 20;
            let hi = (duration_ms - duration_ms / 20).max(lo + 1);
            let t = rng.random_range(lo..hi);
            schedule.push((t, schedule.len(), Item::Inject(inj.property)));
        }
    }
    schedule.sort();

    let mut gen = Generator {
        graph,
        records,
        engine,
        rng,
        user_share: scenario.user_share,
        messages: Vec::new(),
        labels: BTreeMap::new(),
        resolutions: BTreeMap::new(),
        last: 0,
    };
    let mut owed: BTreeMap<u32, usize> = BTreeMap::new();
    for (t, _, item) in schedule {
        let t = t.max(gen.floor());
        gen.maintain(Some(t))?;
        let t = t.max(gen.floor());
        match item {
            Item::Background(i) => gen.background(&scenario.rates[i], t)?,
            Item::Script(i) => {
                let s = &scenario.occupancy[i];
                let m = RuntimeMessage::event(t, &s.event_type, &s.location, &s.payload);
                if safe(gen.graph, &gen.engine, &mut gen.rng, gen.user_share, &m) {
                    gen.emit(m)?;
                }
            }
            Item::Inject(id) => {
                *owed.entry(id).or_default() += 1;
            }
        }
        // Injections owed so far, including retries of earlier failures.
        let ids: Vec<u32> = owed.iter().filter(|(_, n)| **n > 0).map(|(id, _)| *id).collect();
        for id in ids {
            if gen.inject(id, t)? {
                *owed.get_mut(&id).expect("owed entry") -= 1;
            }
        }
    }
    // Remaining injections get a few more attempts at the end.
    for _ in 0..INJECTION_RETRIES {
        let ids: Vec<u32> = owed.iter().filter(|(_, n)| **n > 0).map(|(id, _)| *id).collect();
        for id in ids {
            let t = gen.last + 60_000;
            if gen.inject(id, t)? {
                *owed.get_mut(&id).expect("owed entry") -= 1;
            }
        }
    }
    if let Some((id, n)) = owed.into_iter().find(|(_, n)| *n > 0) {
        return Err(SimError::InfeasibleInjection {
            property: id,
            reason: format!("{n} violation(s) could not be reached from the generated traffic"),
        });
    }
    gen.maintain(None)?;
    Ok(LabeledTrace {
        header: TraceHeader {
            generator: GENERATOR.into(),
            seed: scenario.seed,
            duration: scenario.duration,
        },
        messages: gen.messages,
        labels: gen.labels,
        resolutions: gen.resolutions,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disagreement {
    pub index: usize,
    pub labeled: BTreeSet<u32>,
    pub oracle: BTreeSet<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agreement {
    pub messages: usize,
    pub labeled: usize,
    pub oracle: usize,
    pub disagreements: Vec<Disagreement>,
}

impl Agreement {
    pub fn agrees(&self) -> bool {
        self.disagreements.is_empty()
    }
}

struct FoldSpatial {
    id: u32,
    dims: Vec<StateRef>,
    risk: HashMap<Vec<String>, HashSet<Label>>,
}

struct FoldTemporal {
    id: u32,
    dims: Vec<StateRef>,
    risk: HashMap<Vec<String>, HashSet<Label>>,
    trigger: Formula,
    condition: Formula,
    mode: TimerMode,
    horizon: u64,
    deadline: Option<u64>,
    trigger_was: bool,
}

fn holds(g: &EnvironmentGraph, f: &Formula) -> bool {
    f.eval(&|a| match a {
        Atom::State { state, value } => g.query_state(state).map(|v| v == value).unwrap_or(false),
        _ => false,
    })
}

fn project(g: &EnvironmentGraph, dims: &[StateRef]) -> Vec<String> {
    dims.iter()
        .map(|r| g.query_state(r).unwrap_or_default().to_string())
        .collect()
}

fn risk_table(r: &AnalysisRecord) -> HashMap<Vec<String>, HashSet<Label>> {
    r.violation_trans
        .iter()
        .map(|e| (e.state.clone(), e.transitions.iter().map(|t| t.label.clone()).collect()))
        .collect()
}

fn apply(g: &mut EnvironmentGraph, l: &Label) {
    let _ = match l {
        Label::Event {
            event_type,
            location,
            payload,
        } => g.apply_event(event_type, location, payload),
        Label::Action { action_type, location } => g.apply_action(action_type, location),
    };
}

fn occurs(f: &Formula, l: Option<&Label>) -> Option<bool> {
    match f {
        Formula::Atom(Atom::Occurs {
            kind,
            service,
            location,
        }) => Some(l.is_some_and(|l| l.matches_occurrence(*kind, service, location))),
        _ => None,
    }
}

fn fold_traces(
    g: &EnvironmentGraph,
    temporal: &mut [FoldTemporal],
    now: u64,
    l: Option<&Label>,
    out: &mut BTreeSet<u32>,
) {
    for p in temporal.iter_mut() {
        let cond = holds(g, &p.condition);
        let occ = occurs(&p.trigger, l);
        let trig = occ.unwrap_or_else(|| holds(g, &p.trigger));
        if p.deadline.is_some() {
            let done = match p.mode {
                TimerMode::F => cond,
                TimerMode::G => !cond,
            };
            if done {
                if p.mode == TimerMode::G {
                    out.insert(p.id);
                }
                p.deadline = None;
            } else if occ.is_none() && !trig {
                p.deadline = None;
            }
        }
        let rising = if occ.is_none() { trig && !p.trigger_was } else { trig };
        if p.deadline.is_none() && rising {
            match p.mode {
                TimerMode::F if cond => {}
                TimerMode::G if !cond => {
                    out.insert(p.id);
                }
                _ => p.deadline = Some(now + p.horizon),
            }
        }
        if occ.is_none() {
            p.trigger_was = trig;
        }
    }
}

fn fold_expire(temporal: &mut [FoldTemporal], now: u64, inclusive: bool, out: &mut BTreeSet<u32>) {
    for p in temporal.iter_mut() {
        if let Some(d) = p.deadline {
            if d < now || (inclusive && d == now) {
                if p.mode == TimerMode::F {
                    out.insert(p.id);
                }
                p.deadline = None;
            }
        }
    }
}

/// Re-evaluates a labeled trace with a plain fold over the environment and
/// the analysis tables, and compares the result with the labels.
pub fn verify_labels(graph: &EnvironmentGraph, records: &[AnalysisRecord], trace: &LabeledTrace) -> Agreement {
    let mut g = graph.clone();
    let mut spatial = Vec::new();
    let mut temporal = Vec::new();
    for r in records {
        let dims: Vec<StateRef> = r.dims.iter().map(|d| d.state.clone()).collect();
        match (&r.kind, &r.trace_spec) {
            (PropertyKind::Temporal, Some(spec)) => temporal.push(FoldTemporal {
                id: r.property_id,
                dims,
                risk: risk_table(r),
                trigger: spec.trigger.clone(),
                condition: spec.condition.clone(),
                mode: spec.timer.mode,
                horizon: spec.timer.horizon * 1000,
                deadline: None,
                trigger_was: false,
            }),
            _ => spatial.push(FoldSpatial {
                id: r.property_id,
                dims,
                risk: risk_table(r),
            }),
        }
    }
    let mut report = Agreement {
        messages: trace.messages.len(),
        labeled: trace.violation_count(),
        ..Default::default()
    };
    for (i, m) in trace.messages.iter().enumerate() {
        let now = m.timestamp;
        let mut found = BTreeSet::new();
        fold_expire(&mut temporal, now, false, &mut found);
        let label = label_of(m);
        let expected = trace.resolutions.get(&i).cloned().unwrap_or_default();
        for a in &expected.before {
            apply(&mut g, a);
            fold_traces(&g, &mut temporal, now, Some(a), &mut found);
        }
        if let Some(l) = &label {
            for p in &spatial {
                if p.risk.get(&project(&g, &p.dims)).is_some_and(|t| t.contains(l)) {
                    found.insert(p.id);
                }
            }
            if expected.intercepted {
                for p in &temporal {
                    if p.mode == TimerMode::G
                        && p.deadline.is_some()
                        && p.risk.get(&project(&g, &p.dims)).is_some_and(|t| t.contains(l))
                    {
                        found.insert(p.id);
                    }
                }
            } else {
                apply(&mut g, l);
            }
        }
        let applied = if expected.intercepted { None } else { label.as_ref() };
        if label.is_some() {
            fold_traces(&g, &mut temporal, now, applied, &mut found);
        }
        fold_expire(&mut temporal, now, true, &mut found);
        for a in &expected.actions {
            apply(&mut g, a);
            fold_traces(&g, &mut temporal, now, Some(a), &mut found);
        }
        report.oracle += found.len();
        let labeled = trace.labels.get(&i).cloned().unwrap_or_default();
        if labeled != found {
            report.disagreements.push(Disagreement {
                index: i,
                labeled,
                oracle: found,
            });
        }
    }
    report
}
