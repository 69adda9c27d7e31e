//! Text format for tree definitions: variable declarations followed by a
//! single root node, plus the validator and the builder that assigns
//! order keys and wires up the memory.
//!
//! ```text
//! input x;
//! output land;
//! seq mission {
//!     cond ready { S: x > 0; F: x < 0; R: default }
//!     act go { land := 1; }
//! }
//! ```
//!
//! `//` starts a line comment. Control keywords are `seq`, `sel`, `skip`,
//! and `par`; leaves are `cond` and `act`. `var` is an alias for `input`.

use std::collections::BTreeSet;
use std::fmt;

use crate::engine::{ControlKind, Node, NodeId, NodeKind, OrderKey, Tree};
use crate::error::{Error, Result};
use crate::expr::{self, ActionSpec, ConditionSpec, Expr, Guard};
use crate::memory::{Memory, Scope, STATE_PREFIX};

#[derive(Debug, Clone, PartialEq)]
pub struct VarDecl {
    pub key: String,
    pub scope: Scope,
    pub initial: f64,
    pub local: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeDef {
    Control {
        kind: ControlKind,
        name: Option<String>,
        children: Vec<NodeDef>,
    },
    Condition {
        name: String,
        spec: ConditionSpec,
    },
    Action {
        name: String,
        spec: ActionSpec,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeDefinition {
    pub declarations: Vec<VarDecl>,
    pub root: NodeDef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticKind {
    MissingDefault,
    EmptyControlNode,
    ReservedKeyWrite,
    AssignToInput,
    DivisionPresent,
    ImplicitDeclaration,
}

#[derive(Debug, Clone)]
pub struct Diagnostic {
    pub severity: Severity,
    pub kind: DiagnosticKind,
    pub node: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{tag}: {} ({})", self.message, self.node)
    }
}

// --- Parsing ---------------------------------------------------------------

struct Scanner<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn new(text: &'a str) -> Self {
        Scanner { text, pos: 0 }
    }

    fn error(&self, at: usize, message: impl Into<String>) -> Error {
        let (line, col) = line_col(self.text, at);
        Error::Syntax {
            location: format!("line {line}, column {col}"),
            message: message.into(),
        }
    }

    fn skip_trivia(&mut self) {
        let bytes = self.text.as_bytes();
        loop {
            while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if bytes[self.pos..].starts_with(b"//") {
                while self.pos < bytes.len() && bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
    }

    fn at_end(&mut self) -> bool {
        self.skip_trivia();
        self.pos >= self.text.len()
    }

    fn peek_ident(&mut self) -> Option<&'a str> {
        self.skip_trivia();
        let bytes = self.text.as_bytes();
        let start = self.pos;
        if start >= bytes.len() {
            return None;
        }
        if !(bytes[start].is_ascii_alphabetic() || bytes[start] == b'_') {
            return None;
        }
        let mut end = start;
        while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
            end += 1;
        }
        Some(&self.text[start..end])
    }

    fn take_ident(&mut self) -> Result<&'a str> {
        match self.peek_ident() {
            Some(word) => {
                self.pos += word.len();
                Ok(word)
            }
            None => Err(self.error(self.pos, "expected an identifier")),
        }
    }

    fn eat_symbol(&mut self, sym: &str) -> bool {
        self.skip_trivia();
        if self.text[self.pos..].starts_with(sym) {
            self.pos += sym.len();
            true
        } else {
            false
        }
    }

    fn expect_symbol(&mut self, sym: &str) -> Result<()> {
        if self.eat_symbol(sym) {
            Ok(())
        } else {
            Err(self.error(self.pos, format!("expected `{sym}`")))
        }
    }

    /// Number with an optional leading minus (declaration initializers).
    fn take_number(&mut self) -> Result<f64> {
        self.skip_trivia();
        let bytes = self.text.as_bytes();
        let start = self.pos;
        let mut end = start;
        if end < bytes.len() && bytes[end] == b'-' {
            end += 1;
        }
        let digits_from = end;
        while end < bytes.len() && bytes[end].is_ascii_digit() {
            end += 1;
        }
        if end == digits_from {
            return Err(self.error(start, "expected a number"));
        }
        if end < bytes.len() && bytes[end] == b'.' {
            end += 1;
            let frac_from = end;
            while end < bytes.len() && bytes[end].is_ascii_digit() {
                end += 1;
            }
            if end == frac_from {
                return Err(self.error(end, "expected digits after decimal point"));
            }
        }
        let value: f64 = self.text[start..end]
            .parse()
            .map_err(|_| self.error(start, "bad number literal"))?;
        self.pos = end;
        Ok(value)
    }

    /// Everything up to the next `;` or `}`, handed to the expression
    /// parser. Expressions contain neither delimiter.
    fn take_expr(&mut self) -> Result<Expr> {
        self.skip_trivia();
        let start = self.pos;
        let rest = &self.text[start..];
        let end = rest
            .find([';', '}'])
            .ok_or_else(|| self.error(self.text.len(), "expected `;` or `}`"))?;
        let slice = &rest[..end];
        let parsed = expr::parse_expr(slice).map_err(|e| match e {
            Error::Syntax { message, .. } => self.error(start, message),
            other => other,
        })?;
        self.pos = start + end;
        Ok(parsed)
    }

    /// Statement terminator: a `;`, optional immediately before `}`.
    fn expect_terminator(&mut self) -> Result<()> {
        if self.eat_symbol(";") {
            return Ok(());
        }
        self.skip_trivia();
        if self.text[self.pos..].starts_with('}') {
            Ok(())
        } else {
            Err(self.error(self.pos, "expected `;`"))
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let mut line = 1;
    let mut col = 1;
    for (i, ch) in text.char_indices() {
        if i >= offset {
            break;
        }
        if ch == '\n' {
            line += 1;
            col = 1;
        } else {
            col += 1;
        }
    }
    (line, col)
}

/// Parses a tree definition file.
pub fn parse_tree(text: &str) -> Result<TreeDefinition> {
    let mut s = Scanner::new(text);
    let mut declarations = Vec::new();
    while let Some(word) = s.peek_ident() {
        let (scope, local) = match word {
            "input" | "var" => (Scope::Input, false),
            "output" => (Scope::Output, false),
            "local" => (Scope::Input, true),
            _ => break,
        };
        s.take_ident()?;
        let at = s.pos;
        let key = s.take_ident()?.to_string();
        if is_node_keyword(&key) {
            return Err(s.error(at, format!("`{key}` is a keyword and cannot name a variable")));
        }
        let initial = if s.eat_symbol("=") { s.take_number()? } else { 0.0 };
        s.expect_symbol(";")?;
        declarations.push(VarDecl {
            key,
            scope,
            initial,
            local,
        });
    }
    let root = parse_node(&mut s)?;
    if !s.at_end() {
        return Err(s.error(s.pos, "expected end of file after the root node"));
    }
    Ok(TreeDefinition { declarations, root })
}

fn is_node_keyword(word: &str) -> bool {
    matches!(
        word,
        "seq" | "sel" | "skip" | "par" | "cond" | "act" | "input" | "output" | "local" | "var"
    )
}

fn parse_node(s: &mut Scanner) -> Result<NodeDef> {
    let at = s.pos;
    let word = s.take_ident()?;
    match word {
        "seq" | "sel" | "skip" | "par" => {
            let kind = match word {
                "seq" => ControlKind::Sequence,
                "sel" => ControlKind::Selector,
                "skip" => ControlKind::Skipper,
                _ => ControlKind::Parallel,
            };
            let name = match s.peek_ident() {
                Some(w) if !is_node_keyword(w) => {
                    let w = w.to_string();
                    s.take_ident()?;
                    Some(w)
                }
                _ => None,
            };
            s.expect_symbol("{")?;
            let mut children = Vec::new();
            while !s.eat_symbol("}") {
                if s.at_end() {
                    return Err(s.error(s.pos, "expected `}`"));
                }
                children.push(parse_node(s)?);
            }
            if children.is_empty() {
                return Err(s.error(at, "control node needs at least one child"));
            }
            check_sibling_names(&children)?;
            Ok(NodeDef::Control { kind, name, children })
        }
        "cond" => {
            let name = s.take_ident()?.to_string();
            s.expect_symbol("{")?;
            let mut rules: Vec<(Guard, crate::engine::NodeState)> = Vec::new();
            while !s.eat_symbol("}") {
                let at = s.pos;
                if matches!(rules.last(), Some((Guard::Default, _))) {
                    return Err(s.error(at, "the default rule must be last"));
                }
                let state = match s.take_ident()? {
                    "S" => crate::engine::NodeState::Success,
                    "F" => crate::engine::NodeState::Failure,
                    "R" => crate::engine::NodeState::Running,
                    other => {
                        return Err(s.error(at, format!("expected `S`, `F`, or `R`, found `{other}`")))
                    }
                };
                if rules.iter().any(|(_, existing)| *existing == state) {
                    return Err(s.error(at, format!("duplicate rule for state {state:?}")));
                }
                s.expect_symbol(":")?;
                let guard = if s.peek_ident() == Some("default") {
                    s.take_ident()?;
                    Guard::Default
                } else {
                    Guard::Expr(s.take_expr()?)
                };
                s.expect_terminator()?;
                rules.push((guard, state));
            }
            Ok(NodeDef::Condition {
                name,
                spec: ConditionSpec { rules },
            })
        }
        "act" => {
            let name = s.take_ident()?.to_string();
            s.expect_symbol("{")?;
            let mut assignments = Vec::new();
            while !s.eat_symbol("}") {
                let target = s.take_ident()?.to_string();
                s.expect_symbol(":=")?;
                let rhs = s.take_expr()?;
                s.expect_terminator()?;
                assignments.push((target, rhs));
            }
            if assignments.is_empty() {
                return Err(s.error(at, "action needs at least one assignment"));
            }
            Ok(NodeDef::Action {
                name,
                spec: ActionSpec { assignments },
            })
        }
        other => Err(s.error(at, format!("expected a node, found `{other}`"))),
    }
}

fn check_sibling_names(children: &[NodeDef]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for child in children {
        let name = match child {
            NodeDef::Control { name, .. } => name.clone(),
            NodeDef::Condition { name, .. } | NodeDef::Action { name, .. } => Some(name.clone()),
        };
        if let Some(name) = name {
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateName(name));
            }
        }
    }
    Ok(())
}

// --- Validation ------------------------------------------------------------

/// Checks a definition; errors make it unbuildable, warnings do not.
pub fn validate(def: &TreeDefinition) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let declared: BTreeSet<&str> = def.declarations.iter().map(|d| d.key.as_str()).collect();
    let outputs: BTreeSet<&str> = def
        .declarations
        .iter()
        .filter(|d| matches!(d.scope, Scope::Output))
        .map(|d| d.key.as_str())
        .collect();
    let mut implicit = BTreeSet::new();
    walk(&def.root, &mut |node, path| match node {
        NodeDef::Control { children, .. } => {
            if children.is_empty() {
                diags.push(Diagnostic {
                    severity: Severity::Error,
                    kind: DiagnosticKind::EmptyControlNode,
                    node: path.to_string(),
                    message: "control node has no children".to_string(),
                });
            }
        }
        NodeDef::Condition { name, spec } => {
            let default_last = matches!(spec.rules.last(), Some((Guard::Default, _)));
            let default_count = spec
                .rules
                .iter()
                .filter(|(g, _)| matches!(g, Guard::Default))
                .count();
            if !default_last || default_count != 1 {
                diags.push(Diagnostic {
                    severity: Severity::Error,
                    kind: DiagnosticKind::MissingDefault,
                    node: name.clone(),
                    message: format!("condition `{name}` needs exactly one trailing default rule"),
                });
            }
            for (guard, _) in &spec.rules {
                if let Guard::Expr(e) = guard {
                    note_expr(e, name, &declared, &mut implicit, &mut diags);
                }
            }
        }
        NodeDef::Action { name, spec } => {
            for (target, rhs) in &spec.assignments {
                if target.starts_with(STATE_PREFIX) {
                    diags.push(Diagnostic {
                        severity: Severity::Error,
                        kind: DiagnosticKind::ReservedKeyWrite,
                        node: name.clone(),
                        message: format!("action `{name}` writes reserved key `{target}`"),
                    });
                } else if !outputs.contains(target.as_str()) {
                    diags.push(Diagnostic {
                        severity: Severity::Warning,
                        kind: DiagnosticKind::AssignToInput,
                        node: name.clone(),
                        message: format!(
                            "action `{name}` assigns `{target}`, which is not an output"
                        ),
                    });
                }
                if !declared.contains(target.as_str()) {
                    implicit.insert(target.clone());
                }
                note_expr(rhs, name, &declared, &mut implicit, &mut diags);
            }
        }
    });
    for key in implicit {
        diags.push(Diagnostic {
            severity: Severity::Warning,
            kind: DiagnosticKind::ImplicitDeclaration,
            node: key.clone(),
            message: format!("`{key}` is not declared; it defaults to input 0"),
        });
    }
    diags
}

fn note_expr(
    e: &Expr,
    node: &str,
    declared: &BTreeSet<&str>,
    implicit: &mut BTreeSet<String>,
    diags: &mut Vec<Diagnostic>,
) {
    for key in e.deps() {
        if !declared.contains(key.as_str()) {
            implicit.insert(key);
        }
    }
    if contains_division(e) {
        diags.push(Diagnostic {
            severity: Severity::Warning,
            kind: DiagnosticKind::DivisionPresent,
            node: node.to_string(),
            message: format!("node `{node}` divides; a zero divisor aborts the callback"),
        });
    }
}

fn contains_division(e: &Expr) -> bool {
    match e {
        Expr::Binary(crate::expr::BinOp::Div, ..) => true,
        Expr::Number(_) | Expr::Var(_) => false,
        Expr::Neg(inner) | Expr::Not(inner) => contains_division(inner),
        Expr::Binary(_, a, b) | Expr::Compare(_, a, b) | Expr::And(a, b) | Expr::Or(a, b) => {
            contains_division(a) || contains_division(b)
        }
    }
}

fn walk(node: &NodeDef, visit: &mut impl FnMut(&NodeDef, &str)) {
    fn inner(node: &NodeDef, path: String, visit: &mut impl FnMut(&NodeDef, &str)) {
        visit(node, &path);
        if let NodeDef::Control { children, .. } = node {
            for (i, child) in children.iter().enumerate() {
                inner(child, format!("{path}.{i}"), visit);
            }
        }
    }
    inner(node, "0".to_string(), visit);
}

// --- Building --------------------------------------------------------------

/// Builds an executable tree: orders assigned from the root down, declared
/// variables installed, referenced-but-undeclared variables defaulted to
/// input 0, and all node states initialized to Running.
pub fn build(def: &TreeDefinition) -> Result<Tree> {
    let errors: Vec<String> = validate(def)
        .into_iter()
        .filter(|d| d.severity == Severity::Error)
        .map(|d| d.to_string())
        .collect();
    if !errors.is_empty() {
        return Err(Error::Invalid(errors.join("; ")));
    }

    let mut memory = Memory::new();
    for decl in &def.declarations {
        memory.declare(&decl.key, decl.scope, decl.initial, decl.local)?;
    }
    for key in referenced_keys(&def.root) {
        if !memory.is_declared(&key) {
            memory.insert_raw(&key, Scope::Input, 0.0, key == "time");
        }
    }

    let mut nodes = Vec::new();
    lower(&def.root, OrderKey::root(), None, &mut nodes);
    Ok(Tree::from_parts(nodes, memory))
}

fn referenced_keys(root: &NodeDef) -> BTreeSet<String> {
    let mut keys = BTreeSet::new();
    walk(root, &mut |node, _| match node {
        NodeDef::Condition { spec, .. } => keys.extend(spec.deps()),
        NodeDef::Action { spec, .. } => {
            for (target, rhs) in &spec.assignments {
                keys.insert(target.clone());
                keys.extend(rhs.deps());
            }
        }
        NodeDef::Control { .. } => {}
    });
    keys
}

fn lower(def: &NodeDef, order: OrderKey, parent: Option<NodeId>, nodes: &mut Vec<Node>) -> NodeId {
    let id = nodes.len();
    let (kind, name) = match def {
        NodeDef::Control { kind, name, .. } => {
            let keyword = match kind {
                ControlKind::Sequence => "seq",
                ControlKind::Selector => "sel",
                ControlKind::Skipper => "skip",
                ControlKind::Parallel => "par",
            };
            let dotted: Vec<String> = order.0.iter().map(u32::to_string).collect();
            let name = name
                .clone()
                .unwrap_or_else(|| format!("{keyword}@{}", dotted.join(".")));
            (NodeKind::Control(*kind), name)
        }
        NodeDef::Condition { name, spec } => (NodeKind::Condition(spec.clone()), name.clone()),
        NodeDef::Action { name, spec } => (NodeKind::Action(spec.clone()), name.clone()),
    };
    nodes.push(Tree::make_node(kind, name, order.clone(), parent));
    if let NodeDef::Control { children, .. } = def {
        for (i, child) in children.iter().enumerate() {
            let child_id = lower(child, order.child(i as u32), Some(id), nodes);
            nodes[id].children.push(child_id);
        }
    }
    id
}

// --- Canonical printing ----------------------------------------------------

/// Canonical text rendering; `parse_tree` of the output reproduces the
/// definition.
pub fn print_tree(def: &TreeDefinition) -> String {
    let mut out = String::new();
    for d in &def.declarations {
        let kw = if d.local {
            "local"
        } else if matches!(d.scope, Scope::Output) {
            "output"
        } else {
            "input"
        };
        if d.initial == 0.0 {
            out.push_str(&format!("{kw} {};\n", d.key));
        } else {
            out.push_str(&format!("{kw} {} = {};\n", d.key, d.initial));
        }
    }
    print_node(&def.root, 0, &mut out);
    out
}

fn print_node(node: &NodeDef, depth: usize, out: &mut String) {
    let pad = "    ".repeat(depth);
    match node {
        NodeDef::Control { kind, name, children } => {
            let kw = match kind {
                ControlKind::Sequence => "seq",
                ControlKind::Selector => "sel",
                ControlKind::Skipper => "skip",
                ControlKind::Parallel => "par",
            };
            match name {
                Some(n) => out.push_str(&format!("{pad}{kw} {n} {{\n")),
                None => out.push_str(&format!("{pad}{kw} {{\n")),
            }
            for child in children {
                print_node(child, depth + 1, out);
            }
            out.push_str(&format!("{pad}}}\n"));
        }
        NodeDef::Condition { name, spec } => {
            out.push_str(&format!("{pad}cond {name} {{\n"));
            for (guard, state) in &spec.rules {
                let letter = match state {
                    crate::engine::NodeState::Success => "S",
                    crate::engine::NodeState::Failure => "F",
                    crate::engine::NodeState::Running => "R",
                };
                match guard {
                    Guard::Default => out.push_str(&format!("{pad}    {letter}: default;\n")),
                    Guard::Expr(e) => out.push_str(&format!("{pad}    {letter}: {e};\n")),
                }
            }
            out.push_str(&format!("{pad}}}\n"));
        }
        NodeDef::Action { name, spec } => {
            out.push_str(&format!("{pad}act {name} {{\n"));
            for (target, rhs) in &spec.assignments {
                out.push_str(&format!("{pad}    {target} := {rhs};\n"));
            }
            out.push_str(&format!("{pad}}}\n"));
        }
    }
}
