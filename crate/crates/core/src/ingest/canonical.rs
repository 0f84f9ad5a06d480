//! Canonical form of a block program.
//!
//! Each block becomes one component. Assignments are keyed
//! `{variable}-{role}` (`velocity-init`, `position-update`), other blocks by
//! role alone (`loop`, `conditional`). When several blocks share a key the
//! extras get `#2`, `#3`, ... in sorted expression order, so the result does
//! not depend on block order.
//!
//! Expressions are parsed into a small arithmetic AST and re-rendered:
//! identifiers lowercased, constants in shortest form, operands of `+` and
//! `*` sorted. Anything that does not parse is kept with whitespace collapsed.

use std::collections::BTreeMap;

use crate::model::{Block, BlockRole, CanonicalModel, ModelState, TaskId, Timestamp};

#[derive(Clone, Debug, PartialEq)]
enum Expr {
    Num(f64),
    Var(String),
    Call(String, Vec<Expr>),
    Neg(Box<Expr>),
    /// Flattened n-ary `+` or `*`.
    Nary(char, Vec<Expr>),
    /// `-`, `/`, or a comparison operator.
    Bin(&'static str, Box<Expr>, Box<Expr>),
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(&'static str),
    LParen,
    RParen,
    Comma,
}

const OPS: [&str; 10] = ["<=", ">=", "==", "!=", "<", ">", "+", "-", "*", "/"];

fn lex(s: &str) -> Option<Vec<Tok>> {
    let chars: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            out.push(Tok::Num(text.parse().ok()?));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect::<String>().to_lowercase()));
        } else if c == '(' {
            out.push(Tok::LParen);
            i += 1;
        } else if c == ')' {
            out.push(Tok::RParen);
            i += 1;
        } else if c == ',' {
            out.push(Tok::Comma);
            i += 1;
        } else {
            let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
            let op = OPS.iter().find(|op| op.len() == 2 && **op == two).or_else(|| OPS.iter().find(|op| op.len() == 1 && op.starts_with(c)))?;
            out.push(Tok::Op(op));
            i += op.len();
        }
    }
    Some(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn peek_op(&self, ops: &[&str]) -> Option<&'static str> {
        match self.peek() {
            Some(Tok::Op(op)) if ops.contains(op) => Some(op),
            _ => None,
        }
    }

    fn comparison(&mut self) -> Option<Expr> {
        let lhs = self.additive()?;
        if let Some(op) = self.peek_op(&["<", "<=", ">", ">=", "==", "!="]) {
            self.pos += 1;
            let rhs = self.additive()?;
            return Some(Expr::Bin(op, Box::new(lhs), Box::new(rhs)));
        }
        Some(lhs)
    }

    fn additive(&mut self) -> Option<Expr> {
        let mut lhs = self.term()?;
        while let Some(op) = self.peek_op(&["+", "-"]) {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == "+" { nary('+', lhs, rhs) } else { Expr::Bin("-", Box::new(lhs), Box::new(rhs)) };
        }
        Some(lhs)
    }

    fn term(&mut self) -> Option<Expr> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.peek_op(&["*", "/"]) {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == "*" { nary('*', lhs, rhs) } else { Expr::Bin("/", Box::new(lhs), Box::new(rhs)) };
        }
        Some(lhs)
    }

    fn unary(&mut self) -> Option<Expr> {
        if self.peek_op(&["-"]).is_some() {
            self.pos += 1;
            return Some(match self.unary()? {
                Expr::Num(n) => Expr::Num(-n),
                Expr::Neg(inner) => *inner,
                other => Expr::Neg(Box::new(other)),
            });
        }
        if self.peek_op(&["+"]).is_some() {
            self.pos += 1;
            return self.unary();
        }
        self.atom()
    }

    fn atom(&mut self) -> Option<Expr> {
        match self.next()? {
            Tok::Num(n) => Some(Expr::Num(n)),
            Tok::Ident(name) => {
                if self.peek() == Some(&Tok::LParen) {
                    self.pos += 1;
                    let mut args = Vec::new();
                    if self.peek() == Some(&Tok::RParen) {
                        self.pos += 1;
                        return Some(Expr::Call(name, args));
                    }
                    loop {
                        args.push(self.comparison()?);
                        match self.next()? {
                            Tok::Comma => continue,
                            Tok::RParen => return Some(Expr::Call(name, args)),
                            _ => return None,
                        }
                    }
                }
                Some(Expr::Var(name))
            }
            Tok::LParen => {
                let e = self.comparison()?;
                (self.next()? == Tok::RParen).then_some(e)
            }
            _ => None,
        }
    }
}

fn nary(op: char, lhs: Expr, rhs: Expr) -> Expr {
    let mut items = Vec::new();
    for e in [lhs, rhs] {
        match e {
            Expr::Nary(o, inner) if o == op => items.extend(inner),
            other => items.push(other),
        }
    }
    Expr::Nary(op, items)
}

fn parse(s: &str) -> Option<Expr> {
    let mut p = Parser { toks: lex(s)?, pos: 0 };
    if p.toks.is_empty() {
        return None;
    }
    let e = p.comparison()?;
    (p.pos == p.toks.len()).then_some(e)
}

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Bin(op, ..) if !matches!(*op, "-" | "/") => 1,
        Expr::Nary('+', _) | Expr::Bin("-", ..) => 2,
        Expr::Nary(..) | Expr::Bin(..) => 3,
        Expr::Neg(_) => 4,
        Expr::Num(n) if *n < 0.0 => 4,
        _ => 5,
    }
}

fn op_of(e: &Expr) -> Option<String> {
    match e {
        Expr::Nary(op, _) => Some(op.to_string()),
        Expr::Bin(op, ..) => Some(op.to_string()),
        _ => None,
    }
}

fn needs_parens(parent: &Expr, child: &Expr, right_of_noncommutative: bool) -> bool {
    let (pp, cp) = (prec(parent), prec(child));
    cp < pp || (cp == pp && (op_of(parent) != op_of(child) || right_of_noncommutative))
}

fn wrap(parent: &Expr, child: &Expr, right: bool) -> String {
    let s = render(child);
    if needs_parens(parent, child, right) {
        format!("({s})")
    } else {
        s
    }
}

fn format_num(n: f64) -> String {
    if n == 0.0 {
        return "0".into();
    }
    format!("{n}")
}

fn render(e: &Expr) -> String {
    match e {
        Expr::Num(n) => format_num(*n),
        Expr::Var(v) => v.clone(),
        Expr::Call(name, args) => format!("{name}({})", args.iter().map(render).collect::<Vec<_>>().join(", ")),
        Expr::Neg(inner) => format!("-{}", wrap(e, inner, false)),
        Expr::Nary(op, items) => {
            let mut parts: Vec<String> = items.iter().map(|c| wrap(e, c, false)).collect();
            parts.sort();
            parts.join(&format!(" {op} "))
        }
        Expr::Bin(op, l, r) => {
            let noncommutative = matches!(*op, "-" | "/" | "<" | "<=" | ">" | ">=");
            format!("{} {op} {}", wrap(e, l, false), wrap(e, r, noncommutative))
        }
    }
}

/// Normalized form of one expression, without assignment handling.
pub fn normalize_expression(s: &str) -> String {
    match parse(s) {
        Some(e) => render(&e),
        None => s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase(),
    }
}

/// Splits `lhs = rhs` at the first bare `=` (not part of `==`, `<=`, `>=`, `!=`).
fn split_assignment(s: &str) -> Option<(&str, &str)> {
    let b = s.as_bytes();
    for i in 0..b.len() {
        if b[i] != b'=' {
            continue;
        }
        let prev = i.checked_sub(1).map(|j| b[j]);
        let next = b.get(i + 1).copied();
        if matches!(prev, Some(b'=' | b'<' | b'>' | b'!')) || next == Some(b'=') {
            continue;
        }
        return Some((&s[..i], &s[i + 1..]));
    }
    None
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_alphabetic() || c == '_') && chars.all(|c| c.is_alphanumeric() || c == '_')
}

/// Normalized block expression plus the assigned variable, if any.
pub fn normalize_block(expression: &str) -> (Option<String>, String) {
    if let Some((lhs, rhs)) = split_assignment(expression) {
        let var = lhs.trim().to_lowercase();
        if is_identifier(&var) {
            let rhs = normalize_expression(rhs);
            return (Some(var.clone()), format!("{var} = {rhs}"));
        }
    }
    (None, normalize_expression(expression))
}

fn base_key(role: BlockRole, var: Option<&str>) -> String {
    match var {
        Some(v) => format!("{v}-{}", role.key_suffix()),
        None => role.key_suffix().to_string(),
    }
}

/// Order-independent canonical model of a state. Empty state gives an empty map.
pub fn canonicalize(state: &ModelState) -> CanonicalModel {
    let mut grouped: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for b in &state.blocks {
        let (var, expr) = normalize_block(&b.expression);
        grouped.entry(base_key(b.role, var.as_deref())).or_default().push(expr);
    }
    let mut components = BTreeMap::new();
    for (key, mut exprs) in grouped {
        exprs.sort();
        for (i, e) in exprs.into_iter().enumerate() {
            let k = if i == 0 { key.clone() } else { format!("{key}#{}", i + 1) };
            components.insert(k, e);
        }
    }
    CanonicalModel { components }
}

/// Rebuilds a block program whose canonical form is `model`.
pub fn to_model_state(model: &CanonicalModel, task: TaskId, captured_at: Timestamp) -> ModelState {
    let blocks = model
        .components
        .iter()
        .map(|(key, expr)| {
            let base = key.split('#').next().unwrap_or(key);
            let suffix = base.rsplit('-').next().unwrap_or(base);
            let role = BlockRole::from_key_suffix(suffix).unwrap_or(BlockRole::Other);
            Block { block_id: key.clone(), role, expression: expr.clone() }
        })
        .collect();
    ModelState { task, blocks, captured_at }
}

/// The right-hand side of an assignment component, or the whole expression.
pub fn rhs(expression: &str) -> &str {
    split_assignment(expression).map(|(_, r)| r.trim()).unwrap_or(expression.trim())
}
