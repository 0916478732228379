//! Formula syntax trees shared by property compilation, the MTL parser and
//! the checkers.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::StateRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    Event,
    Action,
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ServiceKind::Event => "event",
            ServiceKind::Action => "action",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "atom", rename_all = "snake_case")]
pub enum Atom {
    /// A proposition as written, before resolution against a graph.
    Path {
        segments: Vec<String>,
        value: Option<String>,
    },
    State {
        state: StateRef,
        value: String,
    },
    /// Occurrence of an event or action service.
    Occurs {
        kind: ServiceKind,
        service: String,
        location: String,
    },
}

impl Atom {
    pub fn state(state: StateRef, value: impl Into<String>) -> Self {
        Atom::State {
            state,
            value: value.into(),
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Path { segments, value } => {
                f.write_str(&segments.join("."))?;
                if let Some(v) = value {
                    write!(f, "={v}")?;
                }
                Ok(())
            }
            Atom::State { state, value } => write!(f, "{state}={value}"),
            Atom::Occurs {
                kind,
                service,
                location,
            } => write!(f, "{kind}({location}.{service})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "op", content = "args", rename_all = "snake_case")]
pub enum Formula {
    True,
    False,
    Atom(Atom),
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Implies(Box<Formula>, Box<Formula>),
    Iff(Box<Formula>, Box<Formula>),
    Always(Box<Formula>),
    Eventually(Box<Formula>),
    AlwaysWithin { lo: u64, hi: u64, body: Box<Formula> },
    EventuallyWithin { lo: u64, hi: u64, body: Box<Formula> },
}

impl From<Atom> for Formula {
    fn from(a: Atom) -> Self {
        Formula::Atom(a)
    }
}

#[allow(clippy::should_implement_trait)]
impl Formula {
    pub fn not(f: Formula) -> Self {
        Formula::Not(Box::new(f))
    }

    pub fn and(a: Formula, b: Formula) -> Self {
        Formula::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Formula, b: Formula) -> Self {
        Formula::Or(Box::new(a), Box::new(b))
    }

    pub fn implies(a: Formula, b: Formula) -> Self {
        Formula::Implies(Box::new(a), Box::new(b))
    }

    pub fn iff(a: Formula, b: Formula) -> Self {
        Formula::Iff(Box::new(a), Box::new(b))
    }

    pub fn always(f: Formula) -> Self {
        Formula::Always(Box::new(f))
    }

    pub fn eventually(f: Formula) -> Self {
        Formula::Eventually(Box::new(f))
    }

    /// Left-nested conjunction; `None` for an empty list.
    pub fn and_all(items: impl IntoIterator<Item = Formula>) -> Option<Formula> {
        items.into_iter().reduce(Formula::and)
    }

    pub fn or_all(items: impl IntoIterator<Item = Formula>) -> Option<Formula> {
        items.into_iter().reduce(Formula::or)
    }

    pub fn is_propositional(&self) -> bool {
        match self {
            Formula::True | Formula::False | Formula::Atom(_) => true,
            Formula::Not(a) => a.is_propositional(),
            Formula::And(a, b) | Formula::Or(a, b) | Formula::Implies(a, b) | Formula::Iff(a, b) => {
                a.is_propositional() && b.is_propositional()
            }
            _ => false,
        }
    }

    pub fn has_bounded(&self) -> bool {
        match self {
            Formula::AlwaysWithin { .. } | Formula::EventuallyWithin { .. } => true,
            Formula::True | Formula::False | Formula::Atom(_) => false,
            Formula::Not(a) | Formula::Always(a) | Formula::Eventually(a) => a.has_bounded(),
            Formula::And(a, b) | Formula::Or(a, b) | Formula::Implies(a, b) | Formula::Iff(a, b) => {
                a.has_bounded() || b.has_bounded()
            }
        }
    }

    pub fn atoms(&self) -> BTreeSet<&Atom> {
        let mut out = BTreeSet::new();
        self.visit_atoms(&mut |a| {
            out.insert(a);
        });
        out
    }

    fn visit_atoms<'a>(&'a self, f: &mut impl FnMut(&'a Atom)) {
        match self {
            Formula::True | Formula::False => {}
            Formula::Atom(a) => f(a),
            Formula::Not(a) | Formula::Always(a) | Formula::Eventually(a) => a.visit_atoms(f),
            Formula::AlwaysWithin { body, .. } | Formula::EventuallyWithin { body, .. } => body.visit_atoms(f),
            Formula::And(a, b) | Formula::Or(a, b) | Formula::Implies(a, b) | Formula::Iff(a, b) => {
                a.visit_atoms(f);
                b.visit_atoms(f);
            }
        }
    }

    /// State references mentioned by state atoms.
    pub fn state_refs(&self) -> BTreeSet<StateRef> {
        self.atoms()
            .into_iter()
            .filter_map(|a| match a {
                Atom::State { state, .. } => Some(state.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn map_atoms<E>(&self, f: &mut impl FnMut(&Atom) -> Result<Formula, E>) -> Result<Formula, E> {
        Ok(match self {
            Formula::True => Formula::True,
            Formula::False => Formula::False,
            Formula::Atom(a) => f(a)?,
            Formula::Not(a) => Formula::not(a.map_atoms(f)?),
            Formula::And(a, b) => Formula::and(a.map_atoms(f)?, b.map_atoms(f)?),
            Formula::Or(a, b) => Formula::or(a.map_atoms(f)?, b.map_atoms(f)?),
            Formula::Implies(a, b) => Formula::implies(a.map_atoms(f)?, b.map_atoms(f)?),
            Formula::Iff(a, b) => Formula::iff(a.map_atoms(f)?, b.map_atoms(f)?),
            Formula::Always(a) => Formula::always(a.map_atoms(f)?),
            Formula::Eventually(a) => Formula::eventually(a.map_atoms(f)?),
            Formula::AlwaysWithin { lo, hi, body } => Formula::AlwaysWithin {
                lo: *lo,
                hi: *hi,
                body: Box::new(body.map_atoms(f)?),
            },
            Formula::EventuallyWithin { lo, hi, body } => Formula::EventuallyWithin {
                lo: *lo,
                hi: *hi,
                body: Box::new(body.map_atoms(f)?),
            },
        })
    }

    /// Evaluates a propositional formula. Temporal nodes evaluate their body
    /// at the current instant.
    pub fn eval(&self, atom: &impl Fn(&Atom) -> bool) -> bool {
        match self {
            Formula::True => true,
            Formula::False => false,
            Formula::Atom(a) => atom(a),
            Formula::Not(a) => !a.eval(atom),
            Formula::And(a, b) => a.eval(atom) && b.eval(atom),
            Formula::Or(a, b) => a.eval(atom) || b.eval(atom),
            Formula::Implies(a, b) => !a.eval(atom) || b.eval(atom),
            Formula::Iff(a, b) => a.eval(atom) == b.eval(atom),
            Formula::Always(a)
            | Formula::Eventually(a)
            | Formula::AlwaysWithin { body: a, .. }
            | Formula::EventuallyWithin { body: a, .. } => a.eval(atom),
        }
    }

    /// Negation normal form of a propositional formula (negated when
    /// `negate` is set): negations sit directly on atoms and `->`/`<->` are
    /// expanded.
    pub fn nnf(&self, negate: bool) -> Formula {
        match self {
            Formula::True => {
                if negate {
                    Formula::False
                } else {
                    Formula::True
                }
            }
            Formula::False => {
                if negate {
                    Formula::True
                } else {
                    Formula::False
                }
            }
            Formula::Atom(a) => {
                let f = Formula::Atom(a.clone());
                if negate {
                    Formula::not(f)
                } else {
                    f
                }
            }
            Formula::Not(a) => a.nnf(!negate),
            Formula::And(a, b) => {
                if negate {
                    Formula::or(a.nnf(true), b.nnf(true))
                } else {
                    Formula::and(a.nnf(false), b.nnf(false))
                }
            }
            Formula::Or(a, b) => {
                if negate {
                    Formula::and(a.nnf(true), b.nnf(true))
                } else {
                    Formula::or(a.nnf(false), b.nnf(false))
                }
            }
            Formula::Implies(a, b) => {
                if negate {
                    Formula::and(a.nnf(false), b.nnf(true))
                } else {
                    Formula::or(a.nnf(true), b.nnf(false))
                }
            }
            Formula::Iff(a, b) => {
                if negate {
                    Formula::or(
                        Formula::and(a.nnf(false), b.nnf(true)),
                        Formula::and(a.nnf(true), b.nnf(false)),
                    )
                } else {
                    Formula::or(
                        Formula::and(a.nnf(false), b.nnf(false)),
                        Formula::and(a.nnf(true), b.nnf(true)),
                    )
                }
            }
            // Temporal operators are outside the propositional core; keep
            // them intact under an explicit negation.
            other => {
                if negate {
                    Formula::not(other.clone())
                } else {
                    other.clone()
                }
            }
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&crate::mtl::render(self))
    }
}
