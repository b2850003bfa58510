//! Branching predicates: a small boolean expression language over flow variables.
//!
//! Grammar:
//!
//! ```text
//! expr := or
//! or   := and ("or" and)*
//! and  := not ("and" not)*
//! not  := "not" not | cmp
//! cmp  := term (op term)? | term "in" "[" literal ("," literal)* "]"
//! op   := "==" | "!=" | "<" | "<=" | ">" | ">="
//! term := identifier | literal | "(" expr ")"
//! ```

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use super::value::{Value, VariableVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

/// Parsed predicate expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    Var(String),
    Lit(Value),
    Not(Box<Predicate>),
    And(Box<Predicate>, Box<Predicate>),
    Or(Box<Predicate>, Box<Predicate>),
    Cmp(CmpOp, Box<Predicate>, Box<Predicate>),
    In(Box<Predicate>, Vec<Value>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("predicate syntax error at {position}: {reason}")]
pub struct PredicateSyntaxError {
    pub position: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("type mismatch at `{0}`")]
    TypeMismatch(String),
}

/// Static type of a variable as seen by the type checker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VarType {
    Bool,
    Number,
    Str,
    Enum(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ty {
    Bool,
    Number,
    Str,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TypeError {
    #[error("undeclared variable `{0}`")]
    Undeclared(String),
    #[error("{0}")]
    Mismatch(String),
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    Str(String),
    True,
    False,
    And,
    Or,
    Not,
    In,
    Op(CmpOp),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, PredicateSyntaxError> {
    let err = |position: usize, reason: &str| PredicateSyntaxError { position, reason: reason.to_string() };
    let chars: Vec<(usize, char)> = src.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        let peek = chars.get(i + 1).map(|&(_, c)| c);
        match c {
            c if c.is_whitespace() => i += 1,
            '(' => { out.push((pos, Tok::LParen)); i += 1; }
            ')' => { out.push((pos, Tok::RParen)); i += 1; }
            '[' => { out.push((pos, Tok::LBracket)); i += 1; }
            ']' => { out.push((pos, Tok::RBracket)); i += 1; }
            ',' => { out.push((pos, Tok::Comma)); i += 1; }
            '=' if peek == Some('=') => { out.push((pos, Tok::Op(CmpOp::Eq))); i += 2; }
            '!' if peek == Some('=') => { out.push((pos, Tok::Op(CmpOp::Ne))); i += 2; }
            '<' if peek == Some('=') => { out.push((pos, Tok::Op(CmpOp::Le))); i += 2; }
            '>' if peek == Some('=') => { out.push((pos, Tok::Op(CmpOp::Ge))); i += 2; }
            '<' => { out.push((pos, Tok::Op(CmpOp::Lt))); i += 1; }
            '>' => { out.push((pos, Tok::Op(CmpOp::Gt))); i += 1; }
            '"' | '\'' => {
                let quote = c;
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err(err(pos, "unterminated string")),
                        Some(&(_, '\\')) => {
                            match chars.get(i + 1) {
                                Some(&(_, e)) => s.push(e),
                                None => return Err(err(pos, "unterminated string")),
                            }
                            i += 2;
                        }
                        Some(&(_, ch)) if ch == quote => {
                            i += 1;
                            break;
                        }
                        Some(&(_, ch)) => {
                            s.push(ch);
                            i += 1;
                        }
                    }
                }
                out.push((pos, Tok::Str(s)));
            }
            c if c.is_ascii_digit() || (c == '-' && peek.is_some_and(|p| p.is_ascii_digit())) => {
                let start = i;
                i += 1;
                while i < chars.len() && (chars[i].1.is_ascii_digit() || chars[i].1 == '.') {
                    i += 1;
                }
                let end = chars.get(i).map_or(src.len(), |&(p, _)| p);
                let text = &src[chars[start].0..end];
                let n: f64 = text.parse().map_err(|_| err(pos, "malformed number"))?;
                out.push((pos, Tok::Num(n)));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].1.is_ascii_alphanumeric() || chars[i].1 == '_') {
                    i += 1;
                }
                let end = chars.get(i).map_or(src.len(), |&(p, _)| p);
                let word = &src[chars[start].0..end];
                let tok = match word {
                    "and" => Tok::And,
                    "or" => Tok::Or,
                    "not" => Tok::Not,
                    "in" => Tok::In,
                    "true" => Tok::True,
                    "false" => Tok::False,
                    _ => Tok::Ident(word.to_string()),
                };
                out.push((pos, tok));
            }
            _ => return Err(err(pos, &format!("unexpected character `{c}`"))),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(p, _)| *p)
    }

    fn fail<T>(&self, reason: &str) -> Result<T, PredicateSyntaxError> {
        Err(PredicateSyntaxError { position: self.offset(), reason: reason.to_string() })
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == Some(tok) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn or(&mut self) -> Result<Predicate, PredicateSyntaxError> {
        let mut lhs = self.and()?;
        while self.eat(&Tok::Or) {
            let rhs = self.and()?;
            lhs = Predicate::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Predicate, PredicateSyntaxError> {
        let mut lhs = self.not()?;
        while self.eat(&Tok::And) {
            let rhs = self.not()?;
            lhs = Predicate::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn not(&mut self) -> Result<Predicate, PredicateSyntaxError> {
        if self.eat(&Tok::Not) {
            return Ok(Predicate::Not(Box::new(self.not()?)));
        }
        self.cmp()
    }

    fn cmp(&mut self) -> Result<Predicate, PredicateSyntaxError> {
        let lhs = self.term()?;
        match self.peek() {
            Some(Tok::Op(op)) => {
                let op = *op;
                self.pos += 1;
                let rhs = self.term()?;
                Ok(Predicate::Cmp(op, Box::new(lhs), Box::new(rhs)))
            }
            Some(Tok::In) => {
                self.pos += 1;
                if !self.eat(&Tok::LBracket) {
                    return self.fail("expected `[` after `in`");
                }
                let mut items = vec![self.literal()?];
                while self.eat(&Tok::Comma) {
                    items.push(self.literal()?);
                }
                if !self.eat(&Tok::RBracket) {
                    return self.fail("expected `]`");
                }
                Ok(Predicate::In(Box::new(lhs), items))
            }
            _ => Ok(lhs),
        }
    }

    fn literal(&mut self) -> Result<Value, PredicateSyntaxError> {
        let v = match self.peek() {
            Some(Tok::Num(n)) => Value::Number(*n),
            Some(Tok::Str(s)) => Value::Str(s.clone()),
            Some(Tok::True) => Value::Bool(true),
            Some(Tok::False) => Value::Bool(false),
            _ => return self.fail("expected literal"),
        };
        self.pos += 1;
        Ok(v)
    }

    fn term(&mut self) -> Result<Predicate, PredicateSyntaxError> {
        match self.peek() {
            Some(Tok::Ident(name)) => {
                let name = name.clone();
                self.pos += 1;
                Ok(Predicate::Var(name))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let inner = self.or()?;
                if !self.eat(&Tok::RParen) {
                    return self.fail("expected `)`");
                }
                Ok(inner)
            }
            Some(Tok::Num(_) | Tok::Str(_) | Tok::True | Tok::False) => Ok(Predicate::Lit(self.literal()?)),
            Some(_) => self.fail("expected identifier, literal or `(`"),
            None => self.fail("unexpected end of input"),
        }
    }
}

/// Parses a predicate string.
pub fn parse_predicate(src: &str) -> Result<Predicate, PredicateSyntaxError> {
    if src.trim().is_empty() {
        return Err(PredicateSyntaxError { position: 0, reason: "empty predicate".into() });
    }
    let toks = lex(src)?;
    let mut p = Parser { toks, pos: 0, end: src.len() };
    let expr = p.or()?;
    if p.pos != p.toks.len() {
        return p.fail("trailing input");
    }
    Ok(expr)
}

// ---------------------------------------------------------------------------
// Evaluation

fn describe(p: &Predicate) -> String {
    match p {
        Predicate::Var(n) => n.clone(),
        other => other.to_string(),
    }
}

fn same_type(a: &Value, b: &Value) -> bool {
    std::mem::discriminant(a) == std::mem::discriminant(b)
}

impl Predicate {
    /// Evaluates against a variable vector. Unbound variables are errors, never `false`.
    pub fn eval(&self, x: &VariableVector) -> Result<bool, EvalError> {
        match self.value(x)? {
            Value::Bool(b) => Ok(b),
            _ => Err(EvalError::TypeMismatch(describe(self))),
        }
    }

    fn value(&self, x: &VariableVector) -> Result<Value, EvalError> {
        match self {
            Predicate::Var(name) => x.get(name).cloned().ok_or_else(|| EvalError::UnboundVariable(name.clone())),
            Predicate::Lit(v) => Ok(v.clone()),
            Predicate::Not(inner) => Ok(Value::Bool(!inner.eval(x)?)),
            Predicate::And(a, b) => {
                // Both sides are evaluated so unbound variables surface regardless of order.
                let (l, r) = (a.eval(x)?, b.eval(x)?);
                Ok(Value::Bool(l && r))
            }
            Predicate::Or(a, b) => {
                let (l, r) = (a.eval(x)?, b.eval(x)?);
                Ok(Value::Bool(l || r))
            }
            Predicate::Cmp(op, a, b) => {
                let (l, r) = (a.value(x)?, b.value(x)?);
                if !same_type(&l, &r) {
                    return Err(EvalError::TypeMismatch(describe(a)));
                }
                let result = match op {
                    CmpOp::Eq => l == r,
                    CmpOp::Ne => l != r,
                    ordering => match (&l, &r) {
                        (Value::Number(l), Value::Number(r)) => match ordering {
                            CmpOp::Lt => l < r,
                            CmpOp::Le => l <= r,
                            CmpOp::Gt => l > r,
                            CmpOp::Ge => l >= r,
                            CmpOp::Eq | CmpOp::Ne => unreachable!(),
                        },
                        _ => return Err(EvalError::TypeMismatch(describe(a))),
                    },
                };
                Ok(Value::Bool(result))
            }
            Predicate::In(term, items) => {
                let v = term.value(x)?;
                if items.iter().any(|i| !same_type(i, &v)) {
                    return Err(EvalError::TypeMismatch(describe(term)));
                }
                Ok(Value::Bool(items.contains(&v)))
            }
        }
    }

    /// Names of all variables referenced.
    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Predicate::Var(n) => {
                out.insert(n.clone());
            }
            Predicate::Lit(_) => {}
            Predicate::Not(a) | Predicate::In(a, _) => a.collect_vars(out),
            Predicate::And(a, b) | Predicate::Or(a, b) | Predicate::Cmp(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    /// Literals this predicate compares against, grouped by the variable they meet.
    pub fn literals_by_variable(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        self.collect_literals(&mut out);
        out
    }

    fn collect_literals(&self, out: &mut Vec<(String, Value)>) {
        match self {
            Predicate::Var(_) | Predicate::Lit(_) => {}
            Predicate::Not(a) => a.collect_literals(out),
            Predicate::And(a, b) | Predicate::Or(a, b) => {
                a.collect_literals(out);
                b.collect_literals(out);
            }
            Predicate::Cmp(_, a, b) => match (a.as_ref(), b.as_ref()) {
                (Predicate::Var(n), Predicate::Lit(v)) | (Predicate::Lit(v), Predicate::Var(n)) => {
                    out.push((n.clone(), v.clone()))
                }
                _ => {
                    a.collect_literals(out);
                    b.collect_literals(out);
                }
            },
            Predicate::In(a, items) => {
                if let Predicate::Var(n) = a.as_ref() {
                    out.extend(items.iter().map(|v| (n.clone(), v.clone())));
                } else {
                    a.collect_literals(out);
                }
            }
        }
    }

    /// Checks that the predicate is well-typed and yields a boolean.
    pub fn type_check(&self, lookup: &dyn Fn(&str) -> Option<VarType>) -> Result<(), TypeError> {
        match self.ty(lookup)? {
            (Ty::Bool, _) => Ok(()),
            _ => Err(TypeError::Mismatch(format!("`{self}` is not a boolean expression"))),
        }
    }

    fn ty(&self, lookup: &dyn Fn(&str) -> Option<VarType>) -> Result<(Ty, Option<Vec<String>>), TypeError> {
        let lit_ty = |v: &Value| match v {
            Value::Bool(_) => Ty::Bool,
            Value::Number(_) => Ty::Number,
            Value::Str(_) => Ty::Str,
        };
        let want_bool = |p: &Predicate| -> Result<(), TypeError> {
            match p.ty(lookup)?.0 {
                Ty::Bool => Ok(()),
                _ => Err(TypeError::Mismatch(format!("`{p}` is not a boolean expression"))),
            }
        };
        let check_enum = |allowed: &Option<Vec<String>>, v: &Value| -> Result<(), TypeError> {
            match (allowed, v) {
                (Some(values), Value::Str(s)) if !values.contains(s) => {
                    Err(TypeError::Mismatch(format!("\"{s}\" is not one of the enum values {values:?}")))
                }
                _ => Ok(()),
            }
        };
        match self {
            Predicate::Var(n) => match lookup(n) {
                None => Err(TypeError::Undeclared(n.clone())),
                Some(VarType::Bool) => Ok((Ty::Bool, None)),
                Some(VarType::Number) => Ok((Ty::Number, None)),
                Some(VarType::Str) => Ok((Ty::Str, None)),
                Some(VarType::Enum(values)) => Ok((Ty::Str, Some(values))),
            },
            Predicate::Lit(v) => Ok((lit_ty(v), None)),
            Predicate::Not(a) => {
                want_bool(a)?;
                Ok((Ty::Bool, None))
            }
            Predicate::And(a, b) | Predicate::Or(a, b) => {
                want_bool(a)?;
                want_bool(b)?;
                Ok((Ty::Bool, None))
            }
            Predicate::Cmp(op, a, b) => {
                let (ta, ea) = a.ty(lookup)?;
                let (tb, eb) = b.ty(lookup)?;
                if ta != tb {
                    return Err(TypeError::Mismatch(format!("cannot compare {ta:?} with {tb:?} in `{self}`")));
                }
                if !matches!(op, CmpOp::Eq | CmpOp::Ne) && ta != Ty::Number {
                    return Err(TypeError::Mismatch(format!("ordering comparison on non-number in `{self}`")));
                }
                if let Predicate::Lit(v) = b.as_ref() {
                    check_enum(&ea, v)?;
                }
                if let Predicate::Lit(v) = a.as_ref() {
                    check_enum(&eb, v)?;
                }
                Ok((Ty::Bool, None))
            }
            Predicate::In(a, items) => {
                let (ta, ea) = a.ty(lookup)?;
                for item in items {
                    if lit_ty(item) != ta {
                        return Err(TypeError::Mismatch(format!("list item {item} has the wrong type in `{self}`")));
                    }
                    check_enum(&ea, item)?;
                }
                Ok((Ty::Bool, None))
            }
        }
    }
}

fn fmt_literal(v: &Value, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match v {
        Value::Str(s) => {
            f.write_str("\"")?;
            for c in s.chars() {
                if c == '"' || c == '\\' {
                    f.write_str("\\")?;
                }
                write!(f, "{c}")?;
            }
            f.write_str("\"")
        }
        Value::Number(n) => write!(f, "{n}"),
        Value::Bool(b) => write!(f, "{b}"),
    }
}

/// Renders in the source grammar; output re-parses to an equal tree.
impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Var(n) => f.write_str(n),
            Predicate::Lit(v) => fmt_literal(v, f),
            Predicate::Not(a) => write!(f, "not ({a})"),
            Predicate::And(a, b) => write!(f, "({a}) and ({b})"),
            Predicate::Or(a, b) => write!(f, "({a}) or ({b})"),
            Predicate::Cmp(op, a, b) => write!(f, "({a}) {} ({b})", op.symbol()),
            Predicate::In(a, items) => {
                write!(f, "({a}) in [")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    fmt_literal(item, f)?;
                }
                f.write_str("]")
            }
        }
    }
}
