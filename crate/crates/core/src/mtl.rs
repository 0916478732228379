//! Lexer, recursive-descent parser and renderer for the temporal formula
//! language, plus the trigger/timer/condition decomposition of bounded
//! response formulas.
//!
//! Grammar (loosest binding first):
//!
//! ```text
//! formula := implies ( "<->" implies )*
//! implies := or ( "->" implies )?
//! or      := and ( "|" and )*
//! and     := unary ( "&" unary )*
//! unary   := "!" unary | ("G" | "F") bound? unary | primary
//! bound   := "[" number "," number "]"
//! primary := "(" formula ")" | "true" | "false"
//!          | ("event" | "action") "(" ident "." ident ")"
//!          | ident ( "." ident )* ( "=" (ident | number) )?
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formula::{Atom, Formula, ServiceKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Position {
    pub line: usize,
    pub col: usize,
    /// Byte offset into the input.
    pub offset: usize,
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Ident,
    Dot,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Number,
    OpG,
    OpF,
    OpAnd,
    OpOr,
    OpNot,
    OpImplies,
    OpIff,
    Eq,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub kind: TokenKind,
    pub lexeme: String,
    pub pos: Position,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MtlError {
    #[error("lex error at {pos}: unexpected `{found}`")]
    Lex { pos: Position, found: char },
    #[error("parse error at {pos}: expected {}, found {found}", expected.join(" or "))]
    Parse {
        pos: Position,
        expected: Vec<String>,
        found: String,
    },
    #[error("unsupported formula shape: {0}")]
    UnsupportedShape(String),
}

impl MtlError {
    pub fn position(&self) -> Option<Position> {
        match self {
            MtlError::Lex { pos, .. } | MtlError::Parse { pos, .. } => Some(*pos),
            MtlError::UnsupportedShape(_) => None,
        }
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

pub fn tokenize(text: &str) -> Result<Vec<Token>, MtlError> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut tokens = Vec::new();
    let (mut line, mut col) = (1usize, 1usize);
    let mut i = 0;
    while i < chars.len() {
        let (offset, c) = chars[i];
        let pos = Position { line, col, offset };
        let start = i;
        let kind = if c == '\n' {
            line += 1;
            col = 1;
            i += 1;
            continue;
        } else if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        } else if is_ident_start(c) {
            while i < chars.len() && is_ident_char(chars[i].1) {
                i += 1;
            }
            let word: String = chars[start..i].iter().map(|(_, c)| c).collect();
            match word.as_str() {
                "G" => TokenKind::OpG,
                "F" => TokenKind::OpF,
                _ => TokenKind::Ident,
            }
        } else if c.is_ascii_digit() {
            while i < chars.len() && chars[i].1.is_ascii_digit() {
                i += 1;
            }
            if i < chars.len() && is_ident_char(chars[i].1) {
                let (off, bad) = chars[i];
                return Err(MtlError::Lex {
                    pos: Position {
                        line,
                        col: col + (i - start),
                        offset: off,
                    },
                    found: bad,
                });
            }
            TokenKind::Number
        } else {
            let next = chars.get(i + 1).map(|(_, c)| *c);
            let next2 = chars.get(i + 2).map(|(_, c)| *c);
            let (kind, len) = match (c, next, next2) {
                ('(', _, _) => (TokenKind::LParen, 1),
                (')', _, _) => (TokenKind::RParen, 1),
                ('[', _, _) => (TokenKind::LBracket, 1),
                (']', _, _) => (TokenKind::RBracket, 1),
                (',', _, _) => (TokenKind::Comma, 1),
                ('.', _, _) => (TokenKind::Dot, 1),
                ('!' | '~' | '¬', _, _) => (TokenKind::OpNot, 1),
                ('&', Some('&'), _) => (TokenKind::OpAnd, 2),
                ('&' | '∧', _, _) => (TokenKind::OpAnd, 1),
                ('|', Some('|'), _) => (TokenKind::OpOr, 2),
                ('|' | '∨', _, _) => (TokenKind::OpOr, 1),
                ('-', Some('>'), _) => (TokenKind::OpImplies, 2),
                ('→', _, _) => (TokenKind::OpImplies, 1),
                ('<', Some('-'), Some('>')) => (TokenKind::OpIff, 3),
                ('↔', _, _) => (TokenKind::OpIff, 1),
                ('=', Some('='), _) => (TokenKind::Eq, 2),
                ('=', _, _) => (TokenKind::Eq, 1),
                _ => return Err(MtlError::Lex { pos, found: c }),
            };
            i += len;
            kind
        };
        let lexeme: String = chars[start..i].iter().map(|(_, c)| c).collect();
        col += i - start;
        tokens.push(Token { kind, lexeme, pos });
    }
    Ok(tokens)
}

struct Parser<'a> {
    tokens: &'a [Token],
    i: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.i)
    }

    fn peek_kind(&self) -> Option<TokenKind> {
        self.peek().map(|t| t.kind)
    }

    fn error(&self, expected: &[&str]) -> MtlError {
        let (pos, found) = match self.peek() {
            Some(t) => (t.pos, format!("`{}`", t.lexeme)),
            None => (
                self.tokens.last().map(|t| t.pos).unwrap_or(Position {
                    line: 1,
                    col: 1,
                    offset: 0,
                }),
                "end of input".to_string(),
            ),
        };
        MtlError::Parse {
            pos,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found,
        }
    }

    fn expect(&mut self, kind: TokenKind, what: &str) -> Result<&Token, MtlError> {
        match self.peek() {
            Some(t) if t.kind == kind => {
                self.i += 1;
                Ok(&self.tokens[self.i - 1])
            }
            _ => Err(self.error(&[what])),
        }
    }

    fn formula(&mut self) -> Result<Formula, MtlError> {
        let mut lhs = self.implies()?;
        while self.peek_kind() == Some(TokenKind::OpIff) {
            self.i += 1;
            lhs = Formula::iff(lhs, self.implies()?);
        }
        Ok(lhs)
    }

    fn implies(&mut self) -> Result<Formula, MtlError> {
        let lhs = self.or()?;
        if self.peek_kind() == Some(TokenKind::OpImplies) {
            self.i += 1;
            return Ok(Formula::implies(lhs, self.implies()?));
        }
        Ok(lhs)
    }

    fn or(&mut self) -> Result<Formula, MtlError> {
        let mut lhs = self.and()?;
        while self.peek_kind() == Some(TokenKind::OpOr) {
            self.i += 1;
            lhs = Formula::or(lhs, self.and()?);
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Formula, MtlError> {
        let mut lhs = self.unary()?;
        while self.peek_kind() == Some(TokenKind::OpAnd) {
            self.i += 1;
            lhs = Formula::and(lhs, self.unary()?);
        }
        Ok(lhs)
    }

    fn number(&mut self) -> Result<u64, MtlError> {
        let t = self.expect(TokenKind::Number, "number")?;
        let pos = t.pos;
        t.lexeme.parse().map_err(|_| MtlError::Parse {
            pos,
            expected: vec!["number that fits in 64 bits".into()],
            found: format!("`{}`", t.lexeme),
        })
    }

    fn unary(&mut self) -> Result<Formula, MtlError> {
        match self.peek_kind() {
            Some(TokenKind::OpNot) => {
                self.i += 1;
                Ok(Formula::not(self.unary()?))
            }
            Some(op @ (TokenKind::OpG | TokenKind::OpF)) => {
                self.i += 1;
                if self.peek_kind() == Some(TokenKind::LBracket) {
                    self.i += 1;
                    let lo = self.number()?;
                    self.expect(TokenKind::Comma, "`,`")?;
                    let hi = self.number()?;
                    if lo > hi {
                        return Err(MtlError::Parse {
                            pos: self.tokens[self.i - 1].pos,
                            expected: vec![format!("upper bound >= {lo}")],
                            found: hi.to_string(),
                        });
                    }
                    self.expect(TokenKind::RBracket, "`]`")?;
                    let body = Box::new(self.unary()?);
                    Ok(if op == TokenKind::OpG {
                        Formula::AlwaysWithin { lo, hi, body }
                    } else {
                        Formula::EventuallyWithin { lo, hi, body }
                    })
                } else {
                    let body = self.unary()?;
                    Ok(if op == TokenKind::OpG {
                        Formula::always(body)
                    } else {
                        Formula::eventually(body)
                    })
                }
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Formula, MtlError> {
        const EXPECTED: &[&str] = &["formula"];
        let Some(tok) = self.peek() else {
            return Err(self.error(EXPECTED));
        };
        match tok.kind {
            TokenKind::LParen => {
                self.i += 1;
                let f = self.formula()?;
                self.expect(TokenKind::RParen, "`)`")?;
                Ok(f)
            }
            TokenKind::Ident => {
                let word = tok.lexeme.clone();
                self.i += 1;
                let next = self.peek_kind();
                match (word.as_str(), next) {
                    ("true", _) if next != Some(TokenKind::Dot) && next != Some(TokenKind::Eq) => {
                        return Ok(Formula::True)
                    }
                    ("false", _) if next != Some(TokenKind::Dot) && next != Some(TokenKind::Eq) => {
                        return Ok(Formula::False)
                    }
                    ("event" | "action", Some(TokenKind::LParen)) => {
                        self.i += 1;
                        let location = self.expect(TokenKind::Ident, "location")?.lexeme.clone();
                        self.expect(TokenKind::Dot, "`.`")?;
                        let service = self.expect(TokenKind::Ident, "service type")?.lexeme.clone();
                        self.expect(TokenKind::RParen, "`)`")?;
                        let kind = if word == "event" {
                            ServiceKind::Event
                        } else {
                            ServiceKind::Action
                        };
                        return Ok(Formula::Atom(Atom::Occurs {
                            kind,
                            service,
                            location,
                        }));
                    }
                    _ => {}
                }
                let mut segments = vec![word];
                while self.peek_kind() == Some(TokenKind::Dot) {
                    self.i += 1;
                    segments.push(self.expect(TokenKind::Ident, "identifier")?.lexeme.clone());
                }
                let value = if self.peek_kind() == Some(TokenKind::Eq) {
                    self.i += 1;
                    match self.peek() {
                        Some(t) if matches!(t.kind, TokenKind::Ident | TokenKind::Number) => {
                            let v = t.lexeme.clone();
                            self.i += 1;
                            Some(v)
                        }
                        _ => return Err(self.error(&["value"])),
                    }
                } else {
                    None
                };
                Ok(Formula::Atom(Atom::Path { segments, value }))
            }
            _ => Err(self.error(EXPECTED)),
        }
    }
}

pub fn parse(tokens: &[Token]) -> Result<Formula, MtlError> {
    let mut p = Parser { tokens, i: 0 };
    let f = p.formula()?;
    if p.i != tokens.len() {
        return Err(p.error(&["end of input", "operator"]));
    }
    Ok(f)
}

pub fn parse_str(text: &str) -> Result<Formula, MtlError> {
    parse(&tokenize(text)?)
}

fn precedence(f: &Formula) -> u8 {
    match f {
        Formula::Iff(..) => 1,
        Formula::Implies(..) => 2,
        Formula::Or(..) => 3,
        Formula::And(..) => 4,
        Formula::Not(_)
        | Formula::Always(_)
        | Formula::Eventually(_)
        | Formula::AlwaysWithin { .. }
        | Formula::EventuallyWithin { .. } => 5,
        Formula::True | Formula::False | Formula::Atom(_) => 6,
    }
}

fn render_at(f: &Formula, min: u8, out: &mut String) {
    if precedence(f) < min {
        out.push('(');
        render_at(f, 0, out);
        out.push(')');
        return;
    }
    let binary = |out: &mut String, a: &Formula, op: &str, b: &Formula, lmin: u8, rmin: u8| {
        render_at(a, lmin, out);
        out.push_str(op);
        render_at(b, rmin, out);
    };
    let prefix = |out: &mut String, op: &str, body: &Formula| {
        out.push_str(op);
        if precedence(body) < 5 {
            out.push('(');
            render_at(body, 0, out);
            out.push(')');
        } else {
            if op != "!" {
                out.push(' ');
            }
            render_at(body, 5, out);
        }
    };
    match f {
        Formula::True => out.push_str("true"),
        Formula::False => out.push_str("false"),
        Formula::Atom(a) => out.push_str(&a.to_string()),
        Formula::Iff(a, b) => binary(out, a, " <-> ", b, 1, 2),
        Formula::Implies(a, b) => binary(out, a, " -> ", b, 3, 2),
        Formula::Or(a, b) => binary(out, a, " | ", b, 3, 4),
        Formula::And(a, b) => binary(out, a, " & ", b, 4, 5),
        Formula::Not(a) => prefix(out, "!", a),
        Formula::Always(a) => prefix(out, "G", a),
        Formula::Eventually(a) => prefix(out, "F", a),
        Formula::AlwaysWithin { lo, hi, body } => prefix(out, &format!("G[{lo},{hi}]"), body),
        Formula::EventuallyWithin { lo, hi, body } => prefix(out, &format!("F[{lo},{hi}]"), body),
    }
}

/// Renders with the minimum parentheses needed to reparse to the same tree.
pub fn render(f: &Formula) -> String {
    let mut out = String::new();
    render_at(f, 0, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TimerMode {
    F,
    G,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Timer {
    pub mode: TimerMode,
    /// Seconds.
    pub horizon: u64,
}

/// Decomposition of `G(trigger -> F[0,t] condition)` or
/// `G(trigger -> G[0,t] condition)`.
///
/// An F-timer is satisfied once the condition holds; a G-timer is violated
/// as soon as the condition stops holding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSpec {
    pub property_id: u32,
    pub trigger: Formula,
    pub timer: Timer,
    pub condition: Formula,
}

impl TraceSpec {
    /// The trigger when it is a bare occurrence atom (edge-triggered by a
    /// message rather than a state).
    pub fn occurrence_trigger(&self) -> Option<&Atom> {
        match &self.trigger {
            Formula::Atom(a @ Atom::Occurs { .. }) => Some(a),
            _ => None,
        }
    }
}

fn has_occurrence(f: &Formula) -> bool {
    f.atoms().iter().any(|a| matches!(a, Atom::Occurs { .. }))
}

pub fn to_trace_spec(property_id: u32, ast: &Formula) -> Result<TraceSpec, MtlError> {
    let unsupported = || MtlError::UnsupportedShape(render(ast));
    let Formula::Always(inner) = ast else {
        return Err(unsupported());
    };
    let Formula::Implies(trigger, timed) = inner.as_ref() else {
        return Err(unsupported());
    };
    let (mode, lo, hi, body) = match timed.as_ref() {
        Formula::AlwaysWithin { lo, hi, body } => (TimerMode::G, *lo, *hi, body),
        Formula::EventuallyWithin { lo, hi, body } => (TimerMode::F, *lo, *hi, body),
        _ => return Err(unsupported()),
    };
    if lo != 0 || hi == 0 || !trigger.is_propositional() || !body.is_propositional() {
        return Err(unsupported());
    }
    let trigger_ok = match trigger.as_ref() {
        Formula::Atom(Atom::Occurs { .. }) => true,
        t => !has_occurrence(t),
    };
    if !trigger_ok || has_occurrence(body) {
        return Err(unsupported());
    }
    Ok(TraceSpec {
        property_id,
        trigger: (**trigger).clone(),
        timer: Timer { mode, horizon: hi },
        condition: (**body).clone(),
    })
}
