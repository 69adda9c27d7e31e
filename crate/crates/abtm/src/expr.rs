//! Leaf-node expression language: guards for conditions, assignments for
//! actions, and watch-set extraction.
//!
//! Grammar (loosest binding first): `or`, `and`, `not`, comparisons,
//! additive, multiplicative, unary minus. `=` is accepted as an alias for
//! `==` inside guards; `:=` is assignment-only and handled by the tree
//! format. Comparisons and logical operators yield 1.0 or 0.0; any nonzero
//! value is true.

use std::collections::BTreeSet;
use std::fmt;

use crate::engine::NodeState;
use crate::error::{Error, Result};
use crate::memory::Memory;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Gt,
    Le,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Number(f64),
    Var(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Compare(CmpOp, Box<Expr>, Box<Expr>),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
}

impl Expr {
    /// Evaluates against a memory. Missing variables auto-declare to 0.0.
    pub fn eval(&self, m: &mut Memory) -> Result<f64> {
        Ok(match self {
            Expr::Number(v) => *v,
            Expr::Var(key) => m.get(key),
            Expr::Neg(e) => -e.eval(m)?,
            Expr::Binary(op, a, b) => {
                let (a, b) = (a.eval(m)?, b.eval(m)?);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(Error::DivideByZero { node: None });
                        }
                        a / b
                    }
                }
            }
            Expr::Compare(op, a, b) => {
                let (a, b) = (a.eval(m)?, b.eval(m)?);
                let truth = match op {
                    CmpOp::Eq => a == b,
                    CmpOp::Ne => a != b,
                    CmpOp::Lt => a < b,
                    CmpOp::Gt => a > b,
                    CmpOp::Le => a <= b,
                    CmpOp::Ge => a >= b,
                };
                bool_value(truth)
            }
            Expr::Not(e) => bool_value(e.eval(m)? == 0.0),
            Expr::And(a, b) => {
                if a.eval(m)? == 0.0 {
                    0.0
                } else {
                    bool_value(b.eval(m)? != 0.0)
                }
            }
            Expr::Or(a, b) => {
                if a.eval(m)? != 0.0 {
                    1.0
                } else {
                    bool_value(b.eval(m)? != 0.0)
                }
            }
        })
    }

    /// The set of variable keys syntactically referenced.
    pub fn deps(&self) -> BTreeSet<String> {
        let mut keys = BTreeSet::new();
        self.collect_deps(&mut keys);
        keys
    }

    fn collect_deps(&self, keys: &mut BTreeSet<String>) {
        match self {
            Expr::Number(_) => {}
            Expr::Var(key) => {
                keys.insert(key.clone());
            }
            Expr::Neg(e) | Expr::Not(e) => e.collect_deps(keys),
            Expr::Binary(_, a, b) | Expr::Compare(_, a, b) | Expr::And(a, b) | Expr::Or(a, b) => {
                a.collect_deps(keys);
                b.collect_deps(keys);
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Or(..) => 0,
            Expr::And(..) => 1,
            Expr::Not(..) => 2,
            Expr::Compare(..) => 3,
            Expr::Binary(BinOp::Add | BinOp::Sub, ..) => 4,
            Expr::Binary(BinOp::Mul | BinOp::Div, ..) => 5,
            Expr::Neg(..) => 6,
            Expr::Number(_) | Expr::Var(_) => 7,
        }
    }

    fn fmt_child(&self, child: &Expr, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Children re-parse at the same spot iff they bind at least as
        // tightly as the parent; same-precedence children of non-associative
        // positions are parenthesized by the callers below.
        if child.precedence() <= self.precedence() {
            write!(f, "({child})")
        } else {
            write!(f, "{child}")
        }
    }
}

fn bool_value(truth: bool) -> f64 {
    if truth {
        1.0
    } else {
        0.0
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Number(v) => write!(f, "{v}"),
            Expr::Var(key) => write!(f, "{key}"),
            Expr::Neg(e) => {
                write!(f, "-")?;
                self.fmt_child(e, f)
            }
            Expr::Binary(op, a, b) => {
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                };
                // Left operand of the same precedence keeps left
                // associativity without parentheses.
                if a.precedence() < self.precedence() {
                    write!(f, "({a})")?;
                } else {
                    write!(f, "{a}")?;
                }
                write!(f, " {sym} ")?;
                self.fmt_child(b, f)
            }
            Expr::Compare(op, a, b) => {
                let sym = match op {
                    CmpOp::Eq => "==",
                    CmpOp::Ne => "!=",
                    CmpOp::Lt => "<",
                    CmpOp::Gt => ">",
                    CmpOp::Le => "<=",
                    CmpOp::Ge => ">=",
                };
                self.fmt_child(a, f)?;
                write!(f, " {sym} ")?;
                self.fmt_child(b, f)
            }
            Expr::Not(e) => {
                // `not` takes a single comparison; a nested `not` (or
                // looser construct) must be parenthesized to re-parse.
                write!(f, "not ")?;
                self.fmt_child(e, f)
            }
            Expr::And(a, b) => {
                if a.precedence() < self.precedence() {
                    write!(f, "({a})")?;
                } else {
                    write!(f, "{a}")?;
                }
                write!(f, " and ")?;
                self.fmt_child(b, f)
            }
            Expr::Or(a, b) => {
                if a.precedence() < self.precedence() {
                    write!(f, "({a})")?;
                } else {
                    write!(f, "{a}")?;
                }
                write!(f, " or ")?;
                self.fmt_child(b, f)
            }
        }
    }
}

/// Guard of a single condition rule.
#[derive(Debug, Clone, PartialEq)]
pub enum Guard {
    Expr(Expr),
    Default,
}

/// Ordered guard rules with a mandatory trailing default; first match wins.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSpec {
    pub rules: Vec<(Guard, NodeState)>,
}

impl ConditionSpec {
    /// Result of the first rule whose guard evaluates nonzero. The default
    /// always matches, so evaluation is total. Side-effect free on
    /// memories whose referenced variables are declared.
    pub fn evaluate(&self, m: &mut Memory) -> Result<NodeState> {
        for (guard, state) in &self.rules {
            match guard {
                Guard::Default => return Ok(*state),
                Guard::Expr(e) => {
                    if e.eval(m)? != 0.0 {
                        return Ok(*state);
                    }
                }
            }
        }
        // Unreachable for specs that satisfy the trailing-default
        // invariant; treat a missing default as Running.
        Ok(NodeState::Running)
    }

    /// Union of the guards' variable references: the watch set.
    pub fn deps(&self) -> BTreeSet<String> {
        let mut keys = BTreeSet::new();
        for (guard, _) in &self.rules {
            if let Guard::Expr(e) = guard {
                e.collect_deps(&mut keys);
            }
        }
        keys
    }
}

/// Ordered assignments applied by an action node.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpec {
    pub assignments: Vec<(String, Expr)>,
}

impl ActionSpec {
    /// Applies the assignments in order; each right-hand side sees the
    /// effect of earlier assignments. Returns the set of changed keys.
    /// On division by zero the applied prefix remains.
    pub fn run(&self, m: &mut Memory) -> Result<BTreeSet<String>> {
        let mut changed = BTreeSet::new();
        for (target, rhs) in &self.assignments {
            let value = rhs.eval(m)?;
            if m.set_one(target, value) {
                changed.insert(target.clone());
            }
        }
        Ok(changed)
    }
}

// --- Parser ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Number(f64),
    Ident(String),
    Op(&'static str),
    LParen,
    RParen,
}

struct Lexed {
    tokens: Vec<(Token, usize)>,
    end: usize,
}

fn lex(text: &str) -> Result<Lexed> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b' ' | b'\t' | b'\r' | b'\n' => i += 1,
            b'(' => {
                tokens.push((Token::LParen, i));
                i += 1;
            }
            b')' => {
                tokens.push((Token::RParen, i));
                i += 1;
            }
            b'+' => {
                tokens.push((Token::Op("+"), i));
                i += 1;
            }
            b'-' => {
                tokens.push((Token::Op("-"), i));
                i += 1;
            }
            b'*' => {
                tokens.push((Token::Op("*"), i));
                i += 1;
            }
            b'/' => {
                tokens.push((Token::Op("/"), i));
                i += 1;
            }
            b'=' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    tokens.push((Token::Op("=="), i));
                    i += 2;
                } else {
                    // `=` aliases `==` in guard position.
                    tokens.push((Token::Op("=="), i));
                    i += 1;
                }
            }
            b'!' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    tokens.push((Token::Op("!="), i));
                    i += 2;
                } else {
                    return Err(syntax(i, "expected `!=`"));
                }
            }
            b'<' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    tokens.push((Token::Op("<="), i));
                    i += 2;
                } else {
                    tokens.push((Token::Op("<"), i));
                    i += 1;
                }
            }
            b'>' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    tokens.push((Token::Op(">="), i));
                    i += 2;
                } else {
                    tokens.push((Token::Op(">"), i));
                    i += 1;
                }
            }
            b'0'..=b'9' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    if i >= bytes.len() || !bytes[i].is_ascii_digit() {
                        return Err(syntax(i, "expected digits after decimal point"));
                    }
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                let value: f64 = text[start..i]
                    .parse()
                    .map_err(|_| syntax(start, "bad number literal"))?;
                tokens.push((Token::Number(value), start));
            }
            b'A'..=b'Z' | b'a'..=b'z' | b'_' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                tokens.push((Token::Ident(text[start..i].to_string()), start));
            }
            _ => return Err(syntax(i, "unexpected character")),
        }
    }
    Ok(Lexed {
        tokens,
        end: bytes.len(),
    })
}

fn syntax(offset: usize, message: &str) -> Error {
    Error::Syntax {
        location: format!("byte {offset}"),
        message: message.to_string(),
    }
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    end: usize,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |(_, o)| *o)
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).map(|(t, _)| t.clone());
        self.pos += 1;
        t
    }

    fn eat_op(&mut self, sym: &str) -> bool {
        if matches!(self.peek(), Some(Token::Op(s)) if *s == sym) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_keyword(&mut self, word: &str) -> bool {
        if matches!(self.peek(), Some(Token::Ident(w)) if w == word) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn parse_or(&mut self) -> Result<Expr> {
        let mut lhs = self.parse_and()?;
        while self.eat_keyword("or") {
            let rhs = self.parse_and()?;
            lhs = Expr::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_and(&mut self) -> Result<Expr> {
        let mut lhs = self.parse_not()?;
        while self.eat_keyword("and") {
            let rhs = self.parse_not()?;
            lhs = Expr::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_not(&mut self) -> Result<Expr> {
        if self.eat_keyword("not") {
            let inner = self.parse_cmp()?;
            return Ok(Expr::Not(Box::new(inner)));
        }
        self.parse_cmp()
    }

    fn parse_cmp(&mut self) -> Result<Expr> {
        let lhs = self.parse_sum()?;
        let op = match self.peek() {
            Some(Token::Op("==")) => Some(CmpOp::Eq),
            Some(Token::Op("!=")) => Some(CmpOp::Ne),
            Some(Token::Op("<")) => Some(CmpOp::Lt),
            Some(Token::Op(">")) => Some(CmpOp::Gt),
            Some(Token::Op("<=")) => Some(CmpOp::Le),
            Some(Token::Op(">=")) => Some(CmpOp::Ge),
            _ => None,
        };
        if let Some(op) = op {
            self.pos += 1;
            let rhs = self.parse_sum()?;
            return Ok(Expr::Compare(op, Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn parse_sum(&mut self) -> Result<Expr> {
        let mut lhs = self.parse_term()?;
        loop {
            let op = match self.peek() {
                Some(Token::Op("+")) => BinOp::Add,
                Some(Token::Op("-")) => BinOp::Sub,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.parse_term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_term(&mut self) -> Result<Expr> {
        let mut lhs = self.parse_factor()?;
        loop {
            let op = match self.peek() {
                Some(Token::Op("*")) => BinOp::Mul,
                Some(Token::Op("/")) => BinOp::Div,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.parse_factor()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_factor(&mut self) -> Result<Expr> {
        if self.eat_op("-") {
            let inner = self.parse_factor()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        let offset = self.offset();
        match self.bump() {
            Some(Token::Number(v)) => Ok(Expr::Number(v)),
            Some(Token::Ident(name)) => {
                if name == "and" || name == "or" || name == "not" {
                    Err(syntax(offset, "expected a value, found an operator"))
                } else {
                    Ok(Expr::Var(name))
                }
            }
            Some(Token::LParen) => {
                let inner = self.parse_or()?;
                if matches!(self.bump(), Some(Token::RParen)) {
                    Ok(inner)
                } else {
                    Err(syntax(self.offset(), "expected `)`"))
                }
            }
            _ => Err(syntax(offset, "expected a number, variable, or `(`")),
        }
    }
}

/// Parses an expression per the guard grammar.
pub fn parse_expr(text: &str) -> Result<Expr> {
    let lexed = lex(text)?;
    let mut p = Parser {
        tokens: lexed.tokens,
        end: lexed.end,
        pos: 0,
    };
    let expr = p.parse_or()?;
    if p.pos != p.tokens.len() {
        return Err(syntax(p.offset(), "unexpected trailing input"));
    }
    Ok(expr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn var(k: &str) -> Box<Expr> {
        Box::new(Expr::Var(k.to_string()))
    }

    fn num(v: f64) -> Box<Expr> {
        Box::new(Expr::Number(v))
    }

    fn eval_str(text: &str, m: &mut Memory) -> Result<f64> {
        parse_expr(text).unwrap().eval(m)
    }

    #[test]
    fn parses_simple_comparison() {
        assert_eq!(
            parse_expr("x > 0").unwrap(),
            Expr::Compare(CmpOp::Gt, var("x"), num(0.0))
        );
        assert_eq!(
            parse_expr("dist < 1.0").unwrap(),
            Expr::Compare(CmpOp::Lt, var("dist"), num(1.0))
        );
    }

    #[test]
    fn equals_alias_parses_like_double_equals() {
        assert_eq!(parse_expr("sub = 1").unwrap(), parse_expr("sub == 1").unwrap());
    }

    #[test]
    fn incomplete_expression_is_a_syntax_error() {
        assert!(matches!(parse_expr("x > 0 and"), Err(Error::Syntax { .. })));
        assert!(matches!(parse_expr(""), Err(Error::Syntax { .. })));
        assert!(matches!(parse_expr("1 + + 2"), Err(Error::Syntax { .. })));
    }

    #[test]
    fn comparison_boundary_is_false() {
        let mut m = Memory::new();
        m.set_one("x", 1.0);
        assert_eq!(eval_str("x > 0", &mut m).unwrap(), 1.0);
        m.set_one("x", 0.0);
        assert_eq!(eval_str("x > 0", &mut m).unwrap(), 0.0);
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let mut m = Memory::new();
        assert!(matches!(
            eval_str("1 / (x - x)", &mut m),
            Err(Error::DivideByZero { .. })
        ));
    }

    #[test]
    fn precedence_follows_the_grammar() {
        let mut m = Memory::new();
        assert_eq!(eval_str("1 + 2 * 3", &mut m).unwrap(), 7.0);
        assert_eq!(eval_str("(1 + 2) * 3", &mut m).unwrap(), 9.0);
        assert_eq!(eval_str("not 1 > 2", &mut m).unwrap(), 1.0);
        assert_eq!(eval_str("1 > 2 or 2 > 1 and 3 > 2", &mut m).unwrap(), 1.0);
        assert_eq!(eval_str("-2 * 3", &mut m).unwrap(), -6.0);
        assert_eq!(eval_str("1 - 2 - 3", &mut m).unwrap(), -4.0);
    }

    #[test]
    fn deps_collects_referenced_keys() {
        let deps = parse_expr("x > 0").unwrap().deps();
        assert_eq!(deps, BTreeSet::from(["x".to_string()]));
        let deps = parse_expr("sub = 1 and mem = 1").unwrap().deps();
        assert_eq!(deps, BTreeSet::from(["sub".to_string(), "mem".to_string()]));
        assert!(parse_expr("3.0 + 4.0").unwrap().deps().is_empty());
    }

    fn three_rule_spec() -> ConditionSpec {
        ConditionSpec {
            rules: vec![
                (Guard::Expr(parse_expr("x > 0").unwrap()), NodeState::Success),
                (Guard::Expr(parse_expr("x < 0").unwrap()), NodeState::Failure),
                (Guard::Default, NodeState::Running),
            ],
        }
    }

    #[test]
    fn condition_first_match_wins_and_default_backstops() {
        let mut m = Memory::new();
        m.set_one("x", 1.0);
        assert_eq!(three_rule_spec().evaluate(&mut m).unwrap(), NodeState::Success);
        m.set_one("x", 0.0);
        assert_eq!(three_rule_spec().evaluate(&mut m).unwrap(), NodeState::Running);
        m.set_one("x", -1.0);
        assert_eq!(three_rule_spec().evaluate(&mut m).unwrap(), NodeState::Failure);
    }

    #[test]
    fn condition_default_failure() {
        let spec = ConditionSpec {
            rules: vec![
                (Guard::Expr(parse_expr("is_red == 1").unwrap()), NodeState::Success),
                (Guard::Default, NodeState::Failure),
            ],
        };
        let mut m = Memory::new();
        m.set_one("is_red", 0.0);
        assert_eq!(spec.evaluate(&mut m).unwrap(), NodeState::Failure);
    }

    #[test]
    fn condition_evaluation_leaves_memory_untouched() {
        let mut m = Memory::new();
        m.set_one("x", 2.0);
        let before = m.canonical_snapshot();
        three_rule_spec().evaluate(&mut m).unwrap();
        assert_eq!(m.canonical_snapshot(), before);
    }

    #[test]
    fn action_applies_in_order_and_reports_changes() {
        let spec = ActionSpec {
            assignments: vec![
                ("mem".to_string(), *num(1.0)),
                ("sub".to_string(), *num(2.0)),
            ],
        };
        let mut m = Memory::new();
        let changed = spec.run(&mut m).unwrap();
        assert_eq!(changed, BTreeSet::from(["mem".to_string(), "sub".to_string()]));
    }

    #[test]
    fn action_sees_its_own_earlier_assignments() {
        let spec = ActionSpec {
            assignments: vec![
                ("a".to_string(), *num(2.0)),
                ("b".to_string(), parse_expr("a + 1").unwrap()),
            ],
        };
        let mut m = Memory::new();
        spec.run(&mut m).unwrap();
        assert_eq!(m.get("b"), 3.0);
    }

    #[test]
    fn action_equal_value_write_is_suppressed() {
        let spec = ActionSpec {
            assignments: vec![("x".to_string(), *num(1.0))],
        };
        let mut m = Memory::new();
        m.set_one("x", 1.0);
        assert!(spec.run(&mut m).unwrap().is_empty());
    }

    #[test]
    fn action_aborts_mid_list_keeping_prefix() {
        let spec = ActionSpec {
            assignments: vec![
                ("a".to_string(), *num(5.0)),
                ("b".to_string(), parse_expr("1 / 0").unwrap()),
                ("c".to_string(), *num(7.0)),
            ],
        };
        let mut m = Memory::new();
        assert!(spec.run(&mut m).is_err());
        assert_eq!(m.get("a"), 5.0);
        assert_eq!(m.get("c"), 0.0);
    }

    // AST generator for the round-trip property. Literals stay in plain
    // decimal form so the printer emits grammar-compatible numbers.
    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0u32..10_000).prop_map(|n| Expr::Number(f64::from(n) / 100.0)),
            "[a-z][a-z0-9_]{0,6}".prop_filter("operator words", |s| {
                s != "and" && s != "or" && s != "not"
            })
            .prop_map(Expr::Var),
        ];
        leaf.prop_recursive(4, 64, 4, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                inner.clone().prop_map(|e| Expr::Not(Box::new(e))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| {
                    Expr::Binary(BinOp::Add, Box::new(a), Box::new(b))
                }),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| {
                    Expr::Binary(BinOp::Sub, Box::new(a), Box::new(b))
                }),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| {
                    Expr::Binary(BinOp::Mul, Box::new(a), Box::new(b))
                }),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| {
                    Expr::Binary(BinOp::Div, Box::new(a), Box::new(b))
                }),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| {
                    Expr::Compare(CmpOp::Le, Box::new(a), Box::new(b))
                }),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| {
                    Expr::Compare(CmpOp::Eq, Box::new(a), Box::new(b))
                }),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Expr::And(Box::new(a), Box::new(b))),
                (inner.clone(), inner)
                    .prop_map(|(a, b)| Expr::Or(Box::new(a), Box::new(b))),
            ]
        })
    }

    proptest! {
        // Printing then re-parsing reproduces the tree, so the printer is a
        // fixed point of parse-print.
        #[test]
        fn print_parse_round_trip(e in arb_expr()) {
            let printed = e.to_string();
            let reparsed = parse_expr(&printed).unwrap();
            prop_assert_eq!(&reparsed, &e);
            prop_assert_eq!(reparsed.to_string(), printed);
        }

        // Two memories agreeing on deps(e) produce identical results.
        #[test]
        fn deps_are_sound(e in arb_expr(), fill in proptest::collection::vec(0.0f64..4.0, 0..8)) {
            let mut m1 = Memory::new();
            let mut m2 = Memory::new();
            for (i, key) in e.deps().iter().enumerate() {
                let v = fill.get(i % fill.len().max(1)).copied().unwrap_or(1.0);
                m1.set_one(key, v);
                m2.set_one(key, v);
            }
            m2.set_one("unrelated_noise", 42.0);
            let r1 = e.eval(&mut m1);
            let r2 = e.eval(&mut m2);
            match (r1, r2) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a.to_bits(), b.to_bits()),
                (Err(_), Err(_)) => {}
                other => prop_assert!(false, "diverged: {:?}", other),
            }
        }
    }
}
