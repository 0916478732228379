//! Property templates, abstract-effect instantiation and formula negation.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formula::{Atom, Formula, ServiceKind};
use crate::model::{CondTarget, EffectKind, EnvironmentGraph, PreConditionSpec, StateRef};
use crate::mtl::{self, MtlError, TraceSpec};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PropertyError {
    #[error("no action provides effect {0}")]
    NoProvidingAction(String),
    #[error("template #{template} {polarity}: {message}")]
    BindingArity {
        template: u8,
        polarity: Polarity,
        message: String,
    },
    #[error("cannot resolve `{text}`: {reason}")]
    UnknownPlaceholderRef { text: String, reason: String },
    #[error("unknown template #{0}")]
    UnknownTemplate(u8),
    #[error("property {0}: needs either a template or a formula")]
    MissingFormula(u32),
    #[error("duplicate property id {0}")]
    DuplicateId(u32),
    #[error(transparent)]
    Mtl(#[from] MtlError),
    #[error("unsupported shape for negation: {0}")]
    UnsupportedShape(String),
    #[error("malformed property file: {0}")]
    File(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Always,
    Never,
    Only,
    More,
    Less,
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::Always => "always",
            Polarity::Never => "never",
            Polarity::Only => "only",
            Polarity::More => "more",
            Polarity::Less => "less",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropertyKind {
    Spatial,
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    InterceptOrRevoke,
    ModifyState,
    InterceptAndReplace,
    NotifyOnly,
}

impl Strategy {
    pub fn intercepts(self) -> bool {
        matches!(self, Strategy::InterceptOrRevoke | Strategy::InterceptAndReplace)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bindings {
    /// Abstract effects, `Space.State_Up`, `Space.State_Down` or `Space.State_value`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub effects: Vec<String>,
    /// State propositions in formula syntax, e.g. `Outdoor.weather=rain`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub states: Vec<String>,
    /// `action(Space.Type)` or `event(Space.Type)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occurrence: Option<String>,
}

/// One authored record of a property file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropertyRecord {
    pub id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<Polarity>,
    #[serde(default)]
    pub bindings: Bindings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<u64>,
    /// Free-form formula used instead of a template.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formula: Option<String>,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Property {
    pub id: u32,
    pub kind: PropertyKind,
    pub template_id: Option<u8>,
    pub polarity: Option<Polarity>,
    pub bindings: Bindings,
    pub time: Option<u64>,
    pub formula: Formula,
    pub strategy: Strategy,
    #[serde(default)]
    pub description: Option<String>,
}

impl Property {
    pub fn trace_spec(&self) -> Result<Option<TraceSpec>, MtlError> {
        match self.kind {
            PropertyKind::Spatial => Ok(None),
            PropertyKind::Temporal => mtl::to_trace_spec(self.id, &self.formula).map(Some),
        }
    }
}

/// An abstract effect: a change kind on one space state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EffectRef {
    pub space: String,
    pub state: String,
    pub effect: EffectKind,
}

fn normalize(s: &str) -> String {
    s.chars().filter(|c| *c != '_').flat_map(char::to_lowercase).collect()
}

/// Resolves an effect name such as `Lab.Temperature_Up`.
pub fn resolve_effect_name(text: &str, graph: &EnvironmentGraph) -> Result<EffectRef, PropertyError> {
    let unknown = |reason: &str| PropertyError::UnknownPlaceholderRef {
        text: text.to_string(),
        reason: reason.to_string(),
    };
    let (space, name) = text
        .trim()
        .split_once('.')
        .ok_or_else(|| unknown("expected `Space.Effect`"))?;
    let node = graph.spaces.get(space).ok_or_else(|| unknown("unknown space"))?;
    let (state_part, suffix) = name
        .rsplit_once('_')
        .ok_or_else(|| unknown("expected `State_Change`"))?;
    let key = normalize(state_part);
    let (state, slot) = node
        .states
        .iter()
        .find(|(n, _)| normalize(n) == key)
        .ok_or_else(|| unknown("no such space state"))?;
    let effect = match suffix.to_ascii_lowercase().as_str() {
        "up" | "increase" | "improve" | "raise" => EffectKind::Increase,
        "down" | "decrease" | "reduce" | "lower" => EffectKind::Decrease,
        other => {
            let value = slot
                .domain
                .iter()
                .find(|v| v.to_ascii_lowercase() == other)
                .ok_or_else(|| unknown("unknown change kind"))?;
            EffectKind::Set { value: value.clone() }
        }
    };
    Ok(EffectRef {
        space: space.to_string(),
        state: state.clone(),
        effect,
    })
}

fn precondition_formula(graph: &EnvironmentGraph, pre: &PreConditionSpec) -> Formula {
    let Ok(slot) = graph.slot(&pre.state) else {
        return Formula::False;
    };
    let mut disjuncts = Vec::new();
    match &pre.target {
        CondTarget::Value(v) => {
            for (i, value) in slot.domain.iter().enumerate() {
                let holds = match slot.index_of(v) {
                    Some(rhs) => pre.operator.holds(i, rhs),
                    None => false,
                };
                if holds {
                    disjuncts.push(Formula::Atom(Atom::state(pre.state.clone(), value)));
                }
            }
        }
        CondTarget::ReferTo(other) => {
            let Ok(other_slot) = graph.slot(other) else {
                return Formula::False;
            };
            for (i, a) in slot.domain.iter().enumerate() {
                for b in &other_slot.domain {
                    if let Some(rhs) = slot.index_of(b) {
                        if pre.operator.holds(i, rhs) {
                            disjuncts.push(Formula::and(
                                Formula::Atom(Atom::state(pre.state.clone(), a)),
                                Formula::Atom(Atom::state(other.clone(), b)),
                            ));
                        }
                    }
                }
            }
        }
    }
    Formula::or_all(disjuncts).unwrap_or(Formula::False)
}

/// Expands an abstract effect into the disjunction, over every action
/// providing it, of (provider device post-state) and (space states that
/// satisfy the effect's precondition, or `true`).
pub fn instantiate_effect(effect: &EffectRef, graph: &EnvironmentGraph) -> Result<Formula, PropertyError> {
    let mut disjuncts = Vec::new();
    for action in &graph.actions {
        let conditions: Vec<Formula> = action
            .effects
            .iter()
            .filter(|e| e.affected_space == effect.space && e.state_name == effect.state && e.effect == effect.effect)
            .map(|e| match &e.precondition {
                None => Formula::True,
                Some(pre) => precondition_formula(graph, pre),
            })
            .collect();
        let Some(condition) = Formula::or_all(conditions) else {
            continue;
        };
        let device = Formula::or_all(
            action
                .device_refs()
                .map(|r| Formula::Atom(Atom::state(r, &action.post_value))),
        )
        .unwrap_or(Formula::False);
        disjuncts.push(match condition {
            Formula::True => device,
            c => Formula::and(device, c),
        });
    }
    Formula::or_all(disjuncts).ok_or_else(|| {
        let kind = match &effect.effect {
            EffectKind::Increase => "up".to_string(),
            EffectKind::Decrease => "down".to_string(),
            EffectKind::Set { value } => value.clone(),
        };
        PropertyError::NoProvidingAction(format!("{}.{}_{}", effect.space, effect.state, kind))
    })
}

/// A device in `space` named by id, or by its type when exactly one device
/// of that type is there.
fn device_in(graph: &EnvironmentGraph, space: &str, name: &str) -> Option<String> {
    if graph.devices.get(name).is_some_and(|d| d.located_in == space) {
        return Some(name.to_string());
    }
    let wanted = normalize(name);
    let mut hits = graph
        .devices
        .values()
        .filter(|d| d.located_in == space && normalize(&d.kind) == wanted);
    match (hits.next(), hits.next()) {
        (Some(d), None) => Some(d.id.clone()),
        _ => None,
    }
}

fn find_device_state(
    graph: &EnvironmentGraph,
    device: &str,
    state: Option<&str>,
    value: &str,
) -> Result<StateRef, String> {
    let node = graph.devices.get(device).ok_or("unknown device")?;
    let mut hits = node.state.iter().filter(|(name, slot)| match state {
        Some(s) => normalize(name) == normalize(s) && slot.index_of(value).is_some(),
        None => slot.index_of(value).is_some(),
    });
    let (name, _) = hits.next().ok_or("no device state holds that value")?;
    if hits.next().is_some() {
        return Err("value is ambiguous across device states".into());
    }
    Ok(StateRef::device(device, name.clone()))
}

fn find_space_state(
    graph: &EnvironmentGraph,
    space: &str,
    state: Option<&str>,
    value: &str,
) -> Result<StateRef, String> {
    let node = graph.spaces.get(space).ok_or("unknown space")?;
    let mut hits = node.states.iter().filter(|(name, slot)| match state {
        Some(s) => normalize(name) == normalize(s) && slot.index_of(value).is_some(),
        None => slot.index_of(value).is_some(),
    });
    let (name, _) = hits.next().ok_or("no space state holds that value")?;
    if hits.next().is_some() {
        return Err("value is ambiguous across space states".into());
    }
    Ok(StateRef::space(space, name.clone()))
}

/// Maps a written path to a state atom.
///
/// Accepted forms: `Owner.state=value`, `Space.Device.state=value`,
/// `Owner.value`, `Space.Device.value`, `Space.State.value` and
/// `Space.Device.state.value`.
pub fn resolve_path(segments: &[String], value: Option<&str>, graph: &EnvironmentGraph) -> Result<Atom, String> {
    let mut segs: Vec<&str> = segments.iter().map(String::as_str).collect();
    let value = match value {
        Some(v) => v,
        None => segs.pop().ok_or("empty proposition")?,
    };
    let explicit_state = |s: &[&str]| -> Option<String> { s.last().map(|x| x.to_string()) };
    let r = match segs.as_slice() {
        [owner] => {
            if graph.spaces.contains_key(*owner) {
                find_space_state(graph, owner, None, value)?
            } else {
                find_device_state(graph, owner, None, value)?
            }
        }
        [owner, name] => {
            if let Some(device) = graph
                .spaces
                .contains_key(*owner)
                .then(|| device_in(graph, owner, name))
                .flatten()
            {
                find_device_state(graph, &device, None, value)?
            } else if graph.spaces.contains_key(*owner) {
                find_space_state(graph, owner, explicit_state(&segs).as_deref(), value)?
            } else {
                find_device_state(graph, owner, Some(name), value)?
            }
        }
        [space, device, state] => {
            let d = device_in(graph, space, device).ok_or_else(|| format!("no device {device} in {space}"))?;
            find_device_state(graph, &d, Some(state), value)?
        }
        _ => return Err("too many path segments".into()),
    };
    let value = graph
        .slot(&r)
        .ok()
        .and_then(|s| s.domain.iter().find(|v| *v == value).cloned())
        .ok_or("value not in domain")?;
    Ok(Atom::State { state: r, value })
}

/// Replaces written paths with resolved state atoms and checks occurrence
/// atoms against the graph.
pub fn resolve_formula(f: &Formula, graph: &EnvironmentGraph) -> Result<Formula, PropertyError> {
    f.map_atoms(&mut |a| match a {
        Atom::Path { segments, value } => resolve_path(segments, value.as_deref(), graph)
            .map(Formula::Atom)
            .map_err(|reason| PropertyError::UnknownPlaceholderRef {
                text: a.to_string(),
                reason,
            }),
        Atom::State { state, value } => match graph.slot(state) {
            Ok(slot) if slot.index_of(value).is_some() => Ok(Formula::Atom(a.clone())),
            _ => Err(PropertyError::UnknownPlaceholderRef {
                text: a.to_string(),
                reason: "unknown state or value".into(),
            }),
        },
        Atom::Occurs {
            kind,
            service,
            location,
        } => {
            let ok = match kind {
                ServiceKind::Event => graph.find_event(service, location).is_ok(),
                ServiceKind::Action => graph.find_action(service, location).is_ok(),
            };
            if ok {
                Ok(Formula::Atom(a.clone()))
            } else {
                Err(PropertyError::UnknownPlaceholderRef {
                    text: a.to_string(),
                    reason: format!("no unique {kind} service"),
                })
            }
        }
    })
}

fn parse_atom_text(text: &str, graph: &EnvironmentGraph) -> Result<Formula, PropertyError> {
    let f = mtl::parse_str(text)?;
    resolve_formula(&f, graph)
}

/// The pieces a Table-style template is assembled from.
#[derive(Debug, Clone, Default)]
pub struct TemplateArgs {
    pub effects: Vec<Formula>,
    pub states: Vec<Formula>,
    pub occurrence: Option<Formula>,
    pub time: Option<u64>,
}

/// `a <-> b <-> c` meaning "all equal": pairwise adjacent equivalences.
fn all_equal(items: &[Formula]) -> Formula {
    Formula::and_all(items.windows(2).map(|w| Formula::iff(w[0].clone(), w[1].clone()))).unwrap_or(Formula::True)
}

/// Accepted number of bindings of one kind.
type Arity = fn(usize) -> bool;

pub fn template_polarities(template: u8) -> Option<[Polarity; 2]> {
    Some(match template {
        1 | 2 | 3 | 6 | 7 => [Polarity::Always, Polarity::Never],
        4 => [Polarity::Only, Polarity::Never],
        5 | 8 => [Polarity::More, Polarity::Less],
        _ => return None,
    })
}

/// Builds the formula of one template row from already-expanded pieces.
pub fn template_formula(template: u8, polarity: Polarity, args: &TemplateArgs) -> Result<Formula, PropertyError> {
    let allowed = template_polarities(template).ok_or(PropertyError::UnknownTemplate(template))?;
    let arity = |message: &str| PropertyError::BindingArity {
        template,
        polarity,
        message: message.to_string(),
    };
    if !allowed.contains(&polarity) {
        return Err(arity("polarity not offered by this template"));
    }
    let n_eff = args.effects.len();
    let n_st = args.states.len();
    let has_occ = args.occurrence.is_some();
    let (need_eff, need_st, need_occ, need_time): (Arity, Arity, bool, bool) = match template {
        1 => (|n| n >= 2, |n| n == 0, false, false),
        2 => (|n| n == 1, |n| n >= 1, false, false),
        3 => (|n| n == 0, |n| n >= 2, false, false),
        4 => (|n| n == 0, |n| n >= 1, true, false),
        5 => (|n| n == 1, |n| n == 0, false, true),
        6 => (|n| n == 1, |n| n >= 1, false, true),
        7 => (|n| n == 0, |n| n >= 1, true, true),
        8 => (|n| n == 0, |n| n >= 1, false, true),
        _ => unreachable!(),
    };
    if !need_eff(n_eff) {
        return Err(arity(&format!("wrong number of effects ({n_eff})")));
    }
    if !need_st(n_st) {
        return Err(arity(&format!("wrong number of states ({n_st})")));
    }
    if need_occ != has_occ {
        return Err(arity("event/action placeholder mismatch"));
    }
    let time = match (need_time, args.time) {
        (true, Some(t)) if t > 0 => t,
        (true, _) => return Err(arity("a positive time is required")),
        (false, Some(_)) => return Err(arity("this template takes no time")),
        (false, None) => 0,
    };
    let states = || Formula::and_all(args.states.iter().cloned()).expect("arity checked");
    let effect = || args.effects[0].clone();
    let occ = || args.occurrence.clone().expect("arity checked");
    let within_f = |body: Formula| Formula::EventuallyWithin {
        lo: 0,
        hi: time,
        body: Box::new(body),
    };
    let within_g = |body: Formula| Formula::AlwaysWithin {
        lo: 0,
        hi: time,
        body: Box::new(body),
    };
    use Polarity::*;
    let body = match (template, polarity) {
        (1, Always) => all_equal(&args.effects),
        (1, Never) => Formula::not(Formula::and_all(args.effects.iter().cloned()).expect("arity")),
        (2, Always) => Formula::implies(states(), effect()),
        (2, Never) => Formula::implies(states(), Formula::not(effect())),
        (3, Always) => all_equal(&args.states),
        (3, Never) => Formula::not(states()),
        (4, Only) => Formula::implies(occ(), states()),
        (4, Never) => Formula::implies(occ(), Formula::not(states())),
        (5, More) => Formula::implies(effect(), within_g(effect())),
        (5, Less) => Formula::implies(effect(), within_f(Formula::not(effect()))),
        (6, Always) => Formula::implies(states(), within_f(effect())),
        (6, Never) => Formula::implies(states(), within_g(Formula::not(effect()))),
        (7, Always) => Formula::implies(occ(), within_f(states())),
        (7, Never) => Formula::implies(occ(), within_g(Formula::not(states()))),
        (8, More) => Formula::implies(states(), within_g(states())),
        (8, Less) => Formula::implies(states(), within_f(Formula::not(states()))),
        _ => unreachable!("polarity checked"),
    };
    Ok(Formula::always(body))
}

/// Instantiates a template row against the graph.
pub fn instantiate_template(
    id: u32,
    template: u8,
    polarity: Polarity,
    bindings: &Bindings,
    time: Option<u64>,
    strategy: Strategy,
    graph: &EnvironmentGraph,
) -> Result<Property, PropertyError> {
    let effects = bindings
        .effects
        .iter()
        .map(|e| instantiate_effect(&resolve_effect_name(e, graph)?, graph))
        .collect::<Result<Vec<_>, _>>()?;
    let states = bindings
        .states
        .iter()
        .map(|s| parse_atom_text(s, graph))
        .collect::<Result<Vec<_>, _>>()?;
    let occurrence = match &bindings.occurrence {
        None => None,
        Some(text) => {
            let f = parse_atom_text(text, graph)?;
            if !matches!(f, Formula::Atom(Atom::Occurs { .. })) {
                return Err(PropertyError::UnknownPlaceholderRef {
                    text: text.clone(),
                    reason: "expected `action(Space.Type)` or `event(Space.Type)`".into(),
                });
            }
            Some(f)
        }
    };
    let args = TemplateArgs {
        effects,
        states,
        occurrence,
        time,
    };
    let formula = template_formula(template, polarity, &args)?;
    Ok(Property {
        id,
        kind: if template >= 5 {
            PropertyKind::Temporal
        } else {
            PropertyKind::Spatial
        },
        template_id: Some(template),
        polarity: Some(polarity),
        bindings: bindings.clone(),
        time,
        formula,
        strategy,
        description: None,
    })
}

pub fn compile_record(rec: &PropertyRecord, graph: &EnvironmentGraph) -> Result<Property, PropertyError> {
    let mut prop = match (&rec.formula, rec.template) {
        (Some(text), _) => {
            let formula = resolve_formula(&mtl::parse_str(text)?, graph)?;
            let kind = if formula.has_bounded() {
                mtl::to_trace_spec(rec.id, &formula)?;
                PropertyKind::Temporal
            } else {
                negate(&formula)?;
                PropertyKind::Spatial
            };
            Property {
                id: rec.id,
                kind,
                template_id: None,
                polarity: None,
                bindings: rec.bindings.clone(),
                time: rec.time,
                formula,
                strategy: rec.strategy,
                description: None,
            }
        }
        (None, Some(t)) => {
            let polarity = rec.polarity.ok_or_else(|| PropertyError::BindingArity {
                template: t,
                polarity: Polarity::Always,
                message: "missing polarity".into(),
            })?;
            instantiate_template(rec.id, t, polarity, &rec.bindings, rec.time, rec.strategy, graph)?
        }
        (None, None) => return Err(PropertyError::MissingFormula(rec.id)),
    };
    prop.description = rec.description.clone();
    Ok(prop)
}

pub fn parse_property_file(text: &str) -> Result<Vec<PropertyRecord>, PropertyError> {
    let records: Vec<PropertyRecord> = serde_json::from_str(text).map_err(|e| PropertyError::File(e.to_string()))?;
    let mut seen = std::collections::BTreeSet::new();
    for r in &records {
        if !seen.insert(r.id) {
            return Err(PropertyError::DuplicateId(r.id));
        }
    }
    Ok(records)
}

/// Compiles all records, sorted by id.
pub fn compile_properties(
    records: &[PropertyRecord],
    graph: &EnvironmentGraph,
) -> Result<Vec<Property>, PropertyError> {
    let mut out = records
        .iter()
        .map(|r| compile_record(r, graph))
        .collect::<Result<Vec<_>, _>>()?;
    out.sort_by_key(|p| p.id);
    Ok(out)
}

/// `G(psi)` to `F(nnf(!psi))`.
pub fn negate(f: &Formula) -> Result<Formula, PropertyError> {
    match f {
        Formula::Always(body) if body.is_propositional() => Ok(Formula::eventually(body.nnf(true))),
        other => Err(PropertyError::UnsupportedShape(other.to_string())),
    }
}

/// The propositional body of a `G`- or `F`-rooted formula.
pub fn core(f: &Formula) -> Option<&Formula> {
    match f {
        Formula::Always(b) | Formula::Eventually(b) => Some(b),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(name: &str) -> Formula {
        Formula::Atom(Atom::Path {
            segments: vec![name.into()],
            value: None,
        })
    }

    #[test]
    fn negation_examples() {
        let ac_heater = Formula::and(p("ac"), p("heater"));
        assert_eq!(
            negate(&Formula::always(Formula::not(ac_heater.clone()))).unwrap(),
            Formula::eventually(ac_heater)
        );
        assert_eq!(
            negate(&Formula::always(Formula::implies(p("p"), p("q")))).unwrap(),
            Formula::eventually(Formula::and(p("p"), Formula::not(p("q"))))
        );
        assert_eq!(
            negate(&Formula::always(Formula::iff(p("p"), p("q")))).unwrap(),
            Formula::eventually(Formula::or(
                Formula::and(p("p"), Formula::not(p("q"))),
                Formula::and(Formula::not(p("p")), p("q"))
            ))
        );
        assert!(negate(&Formula::eventually(p("p"))).is_err());
    }

    #[test]
    fn arity_errors() {
        let args = TemplateArgs {
            effects: vec![p("a"), p("b")],
            states: vec![p("s")],
            ..Default::default()
        };
        assert!(matches!(
            template_formula(2, Polarity::Always, &args),
            Err(PropertyError::BindingArity { .. })
        ));
        assert!(matches!(
            template_formula(4, Polarity::Always, &args),
            Err(PropertyError::BindingArity { .. })
        ));
        assert!(matches!(
            template_formula(9, Polarity::Always, &args),
            Err(PropertyError::UnknownTemplate(9))
        ));
    }

    #[test]
    fn row_eight_less() {
        let args = TemplateArgs {
            states: vec![p("speaker")],
            time: Some(60),
            ..Default::default()
        };
        let f = template_formula(8, Polarity::Less, &args).unwrap();
        assert_eq!(mtl::render(&f), "G(speaker -> F[0,60] !speaker)");
    }
}
