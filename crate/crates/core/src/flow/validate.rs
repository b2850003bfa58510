//! Static checks over a parsed flow.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use super::model::*;
use super::predicate::Predicate;
use super::template::{PromptTemplate, LANGUAGE_PLACEHOLDER};
use super::value::{Value, VariableVector};

/// Upper bound on assignments enumerated by the reachability check.
const MAX_ASSIGNMENTS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FindingCode {
    EmptyFlow,
    NoLanguages,
    DuplicateNodeId,
    DuplicateVariable,
    DuplicateOptionId,
    EmptyEnum,
    EmptyVariationPool,
    UnknownTarget,
    UndeclaredVariable,
    TypeError,
    MissingLanguage,
    DiscreteOptions,
    OpenHasOptions,
    StructuredClarification,
    InvalidConfig,
    Cycle,
    NoPathToEnd,
    UnreachableNode,
}

impl FindingCode {
    pub fn as_str(self) -> &'static str {
        match self {
            FindingCode::EmptyFlow => "EMPTY_FLOW",
            FindingCode::NoLanguages => "NO_LANGUAGES",
            FindingCode::DuplicateNodeId => "DUPLICATE_NODE_ID",
            FindingCode::DuplicateVariable => "DUPLICATE_VARIABLE",
            FindingCode::DuplicateOptionId => "DUPLICATE_OPTION_ID",
            FindingCode::EmptyEnum => "EMPTY_ENUM",
            FindingCode::EmptyVariationPool => "EMPTY_VARIATION_POOL",
            FindingCode::UnknownTarget => "UNKNOWN_TARGET",
            FindingCode::UndeclaredVariable => "UNDECLARED_VARIABLE",
            FindingCode::TypeError => "TYPE_ERROR",
            FindingCode::MissingLanguage => "MISSING_LANGUAGE",
            FindingCode::DiscreteOptions => "DISCRETE_OPTIONS",
            FindingCode::OpenHasOptions => "OPEN_HAS_OPTIONS",
            FindingCode::StructuredClarification => "STRUCTURED_CLARIFICATION",
            FindingCode::InvalidConfig => "INVALID_CONFIG",
            FindingCode::Cycle => "CYCLE",
            FindingCode::NoPathToEnd => "NO_PATH_TO_END",
            FindingCode::UnreachableNode => "UNREACHABLE_NODE",
        }
    }
}

impl fmt::Display for FindingCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub code: FindingCode,
    pub severity: Severity,
    pub location: String,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev} {} at {}: {}", self.code, self.location, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn has(&self, code: FindingCode) -> bool {
        self.findings.iter().any(|f| f.code == code)
    }

    fn push(&mut self, code: FindingCode, location: impl Into<String>, message: impl Into<String>) {
        let severity = match code {
            FindingCode::UnreachableNode => Severity::Warning,
            _ => Severity::Error,
        };
        self.findings.push(Finding { code, severity, location: location.into(), message: message.into() });
    }
}

/// Checks every flow invariant and reports each violation.
pub fn validate_flow(flow: &FlowDefinition) -> ValidationReport {
    let mut r = ValidationReport::default();
    if flow.nodes.is_empty() {
        r.push(FindingCode::EmptyFlow, "nodes", "a flow needs at least one node");
    }
    if flow.languages.is_empty() {
        r.push(FindingCode::NoLanguages, "languages", "at least one language tag is required");
    }
    check_config(flow, &mut r);
    check_variables(flow, &mut r);

    let mut seen = BTreeSet::new();
    for (i, n) in flow.nodes.iter().enumerate() {
        if !seen.insert(n.id.as_str()) {
            r.push(FindingCode::DuplicateNodeId, format!("nodes[{i}].id"), format!("node id `{}` repeats", n.id));
        }
    }
    for (i, n) in flow.nodes.iter().enumerate() {
        check_node(flow, i, n, &mut r);
    }
    for (name, t) in [
        ("apology", &flow.messages.apology),
        ("listening", &flow.messages.listening),
        ("other_prompt", &flow.messages.other_prompt),
        ("clarify_fallback", &flow.messages.clarify_fallback),
        ("closing", &flow.messages.closing),
    ] {
        check_template(flow, &format!("messages.{name}"), t, &mut r);
    }

    let targets_ok = flow.nodes.iter().all(|n| n.targets().all(|t| t == END || flow.node(t).is_some()));
    if !flow.nodes.is_empty() && targets_ok && seen.len() == flow.nodes.len() {
        check_graph(flow, &mut r);
    }
    r
}

fn check_config(flow: &FlowDefinition, r: &mut ValidationReport) {
    let c = &flow.config;
    if !(0.0..=2.0).contains(&c.temperature) {
        r.push(FindingCode::InvalidConfig, "config.temperature", "temperature must lie in [0, 2]");
    }
    if c.max_input_chars == 0 {
        r.push(FindingCode::InvalidConfig, "config.max_input_chars", "must be positive");
    }
    if c.max_output_chars == 0 {
        r.push(FindingCode::InvalidConfig, "config.max_output_chars", "must be positive");
    }
    if c.max_questions == 0 {
        r.push(FindingCode::InvalidConfig, "config.max_questions", "must be positive");
    }
}

fn check_variables(flow: &FlowDefinition, r: &mut ValidationReport) {
    let mut names = BTreeSet::new();
    for (i, v) in flow.variables.iter().enumerate() {
        if !names.insert(v.name.as_str()) {
            r.push(FindingCode::DuplicateVariable, format!("variables[{i}]"), format!("`{}` declared twice", v.name));
        }
        if let VariableKind::Enum(values) = &v.kind {
            if values.is_empty() {
                r.push(FindingCode::EmptyEnum, format!("variables[{i}].values"), "enum lists no values");
            }
        }
    }
}

fn check_template(flow: &FlowDefinition, path: &str, t: &PromptTemplate, r: &mut ValidationReport) {
    for name in t.placeholders() {
        if name != LANGUAGE_PLACEHOLDER && flow.variable(&name).is_none() {
            r.push(FindingCode::UndeclaredVariable, path, format!("placeholder `{name}` names no variable"));
        }
    }
    for lang in &flow.languages {
        if !t.has_language(lang) {
            r.push(FindingCode::MissingLanguage, path, format!("no `{lang}` variant"));
        }
    }
}

fn check_node(flow: &FlowDefinition, i: usize, n: &QuestionNode, r: &mut ValidationReport) {
    let path = format!("nodes[{i}]");
    match &n.question {
        QuestionText::Template(t) => check_template(flow, &format!("{path}.template"), t, r),
        QuestionText::VariationPool(pool) => {
            if pool.is_empty() {
                r.push(FindingCode::EmptyVariationPool, format!("{path}.variation_pool"), "pool is empty");
            }
            for (j, t) in pool.iter().enumerate() {
                check_template(flow, &format!("{path}.variation_pool[{j}]"), t, r);
            }
        }
    }
    match n.kind {
        NodeKind::Discrete if n.options.len() < 2 => {
            r.push(FindingCode::DiscreteOptions, format!("{path}.options"), "discrete nodes need at least two options")
        }
        NodeKind::Open if !n.options.is_empty() => {
            r.push(FindingCode::OpenHasOptions, format!("{path}.options"), "open nodes take no options")
        }
        _ => {}
    }
    let mut ids = BTreeSet::new();
    for (j, o) in n.options.iter().enumerate() {
        if !ids.insert(o.id.as_str()) {
            r.push(FindingCode::DuplicateOptionId, format!("{path}.options[{j}]"), format!("option `{}` repeats", o.id));
        }
        check_template(flow, &format!("{path}.options[{j}].label"), &o.label, r);
    }
    if flow.mode == FlowMode::Structured && n.max_clarifications > 0 {
        r.push(
            FindingCode::StructuredClarification,
            format!("{path}.max_clarifications"),
            "structured flows allow no clarifications",
        );
    }
    for (j, v) in n.extract.iter().enumerate() {
        if flow.variable(v).is_none() {
            r.push(FindingCode::UndeclaredVariable, format!("{path}.extract[{j}]"), format!("`{v}` is not declared"));
        }
    }
    for (j, rule) in n.branch_rules.iter().enumerate() {
        let rpath = format!("{path}.branch_rules[{j}]");
        if rule.target != END && flow.node(&rule.target).is_none() {
            r.push(FindingCode::UnknownTarget, rpath.clone(), format!("`{}` names no node", rule.target));
        }
        let undeclared: Vec<_> = rule.when.variables().into_iter().filter(|v| flow.variable(v).is_none()).collect();
        for v in &undeclared {
            r.push(FindingCode::UndeclaredVariable, format!("{rpath}.when"), format!("`{v}` is not declared"));
        }
        if undeclared.is_empty() {
            if let Err(e) = rule.when.type_check(&|name| flow.var_type(name)) {
                r.push(FindingCode::TypeError, format!("{rpath}.when"), e.to_string());
            }
        }
    }
    if n.default_target != END && flow.node(&n.default_target).is_none() {
        r.push(FindingCode::UnknownTarget, format!("{path}.default_target"), format!("`{}` names no node", n.default_target));
    }
    if let Some(t) = &n.followup_template {
        check_template(flow, &format!("{path}.followup_template"), t, r);
    }
    for (j, t) in n.preface.iter().enumerate() {
        check_template(flow, &format!("{path}.preface[{j}]"), t, r);
    }
}

fn check_graph(flow: &FlowDefinition, r: &mut ValidationReport) {
    if let Some(id) = find_cycle(flow) {
        r.push(FindingCode::Cycle, format!("nodes[{}]", flow.node_index(&id).unwrap_or(0)), format!("a loop passes through `{id}`"));
        return;
    }
    let Reachability { visited, reaches_end } = reachability(flow);
    if !reaches_end {
        r.push(FindingCode::NoPathToEnd, "nodes[0]", "no assignment leads from the first node to END");
    }
    for (i, n) in flow.nodes.iter().enumerate() {
        if !visited.contains(n.id.as_str()) {
            r.push(FindingCode::UnreachableNode, format!("nodes[{i}]"), format!("`{}` is reached under no assignment", n.id));
        }
    }
}

/// Node on some cycle of the full edge graph, if any.
fn find_cycle(flow: &FlowDefinition) -> Option<String> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    fn visit(flow: &FlowDefinition, i: usize, marks: &mut [Mark]) -> Option<usize> {
        marks[i] = Mark::Open;
        for t in flow.nodes[i].targets() {
            let Some(j) = flow.node_index(t) else { continue };
            match marks[j] {
                Mark::Open => return Some(j),
                Mark::New => {
                    if let Some(c) = visit(flow, j, marks) {
                        return Some(c);
                    }
                }
                Mark::Done => {}
            }
        }
        marks[i] = Mark::Done;
        None
    }
    let mut marks = vec![Mark::New; flow.nodes.len()];
    (0..flow.nodes.len())
        .find_map(|i| if marks[i] == Mark::New { visit(flow, i, &mut marks) } else { None })
        .map(|j| flow.nodes[j].id.clone())
}

struct Reachability<'a> {
    visited: BTreeSet<&'a str>,
    reaches_end: bool,
}

/// Walks the flow under every representative assignment of the branching variables.
fn reachability(flow: &FlowDefinition) -> Reachability<'_> {
    let domains = representative_domains(flow);
    let total = domains.iter().try_fold(1usize, |acc, (_, d)| acc.checked_mul(d.len().max(1)));
    let mut visited = BTreeSet::new();
    let mut reaches_end = false;
    match total {
        Some(total) if total <= MAX_ASSIGNMENTS => {
            for k in 0..total {
                let mut x = VariableVector::default();
                let mut rest = k;
                for (name, domain) in &domains {
                    x.set_plain(name, domain[rest % domain.len()].clone());
                    rest /= domain.len();
                }
                let mut cur = flow.nodes[0].id.as_str();
                let mut path = BTreeSet::new();
                loop {
                    if cur == END {
                        reaches_end = true;
                        break;
                    }
                    if !path.insert(cur) {
                        break;
                    }
                    visited.insert(cur);
                    let node = flow.node(cur).expect("targets checked");
                    cur = node
                        .branch_rules
                        .iter()
                        .find(|r| r.when.eval(&x).unwrap_or(false))
                        .map(|r| r.target.as_str())
                        .unwrap_or(node.default_target.as_str());
                }
            }
        }
        _ => {
            // Too many assignments: every edge counts as traversable.
            let mut stack = vec![flow.nodes[0].id.as_str()];
            while let Some(cur) = stack.pop() {
                if cur == END {
                    reaches_end = true;
                    continue;
                }
                if visited.insert(cur) {
                    stack.extend(flow.node(cur).expect("targets checked").targets());
                }
            }
        }
    }
    Reachability { visited, reaches_end }
}

/// Finite value sets that exercise every outcome of the flow's predicates.
fn representative_domains(flow: &FlowDefinition) -> Vec<(String, Vec<Value>)> {
    let mut literals: BTreeMap<String, Vec<Value>> = BTreeMap::new();
    let mut used = BTreeSet::new();
    for rule in flow.nodes.iter().flat_map(|n| &n.branch_rules) {
        used.extend(rule.when.variables());
        for (name, v) in rule.when.literals_by_variable() {
            literals.entry(name).or_default().push(v);
        }
    }
    used.into_iter()
        .map(|name| {
            let lits = literals.remove(&name).unwrap_or_default();
            let domain = match flow.variable(&name).map(|v| &v.kind) {
                Some(VariableKind::Boolean) => vec![Value::Bool(false), Value::Bool(true)],
                Some(VariableKind::Enum(values)) => values.iter().cloned().map(Value::Str).collect(),
                Some(VariableKind::Number) => number_points(&lits),
                _ => string_points(&lits),
            };
            (name, domain)
        })
        .collect()
}

fn number_points(lits: &[Value]) -> Vec<Value> {
    let mut xs: Vec<f64> = lits.iter().filter_map(|v| if let Value::Number(n) = v { Some(*n) } else { None }).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.is_empty() {
        return vec![Value::Number(0.0)];
    }
    let mut out = vec![xs[0] - 1.0];
    for (i, x) in xs.iter().enumerate() {
        out.push(*x);
        match xs.get(i + 1) {
            Some(next) => out.push((x + next) / 2.0),
            None => out.push(x + 1.0),
        }
    }
    out.into_iter().map(Value::Number).collect()
}

fn string_points(lits: &[Value]) -> Vec<Value> {
    let mut xs: Vec<String> = lits.iter().filter_map(|v| if let Value::Str(s) = v { Some(s.clone()) } else { None }).collect();
    xs.sort();
    xs.dedup();
    let mut fresh = String::from("\u{1}");
    while xs.contains(&fresh) {
        fresh.push('\u{1}');
    }
    xs.push(fresh);
    xs.into_iter().map(Value::Str).collect()
}

/// Evaluates first-match branching from `node` over `x`, skipping rules that fail to evaluate.
pub fn first_match<'a>(node: &'a QuestionNode, x: &VariableVector) -> (&'a str, Vec<(usize, String)>) {
    let mut skipped = Vec::new();
    for (j, rule) in node.branch_rules.iter().enumerate() {
        match rule.when.eval(x) {
            Ok(true) => return (rule.target.as_str(), skipped),
            Ok(false) => {}
            Err(e) => skipped.push((j, e.to_string())),
        }
    }
    (node.default_target.as_str(), skipped)
}

/// Every predicate a flow uses, with its location.
pub fn predicates(flow: &FlowDefinition) -> impl Iterator<Item = (String, &Predicate)> {
    flow.nodes.iter().enumerate().flat_map(|(i, n)| {
        n.branch_rules.iter().enumerate().map(move |(j, r)| (format!("nodes[{i}].branch_rules[{j}].when"), &r.when))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::parse_flow;

    fn flow(nodes: &str, vars: &str) -> FlowDefinition {
        parse_flow(&format!(
            r#"{{"id": "t", "version": "1", "mode": "semi_structured", "languages": ["en"],
                "variables": [{vars}], "nodes": [{nodes}]}}"#
        ))
        .unwrap()
    }

    #[test]
    fn three_node_flow_is_clean() {
        let f = flow(
            r#"{"id": "a", "kind": "open", "template": "A?", "extract": ["bike"], "default_target": "b",
                "branch_rules": [{"when": "bike", "target": "c"}]},
               {"id": "b", "kind": "open", "template": "B?", "default_target": "c"},
               {"id": "c", "kind": "open", "template": "C?", "default_target": "END"}"#,
            r#"{"name": "bike", "kind": "boolean"}"#,
        );
        let report = validate_flow(&f);
        assert!(report.is_clean(), "{:?}", report.findings);
    }

    #[test]
    fn undeclared_variable() {
        let f = flow(
            r#"{"id": "a", "kind": "open", "template": "A?", "default_target": "END",
                "branch_rules": [{"when": "age2 > 3", "target": "END"}]}"#,
            r#"{"name": "age", "kind": "number"}"#,
        );
        let report = validate_flow(&f);
        assert!(report.has(FindingCode::UndeclaredVariable));
        assert_eq!(report.findings[0].location, "nodes[0].branch_rules[0].when");
    }

    #[test]
    fn unreachable_under_all_boolean_assignments() {
        let f = flow(
            r#"{"id": "a", "kind": "open", "template": "A?", "default_target": "x",
                "branch_rules": [{"when": "p or not p", "target": "b"}]},
               {"id": "b", "kind": "open", "template": "B?", "default_target": "END",
                "branch_rules": [{"when": "p and q", "target": "END"}]},
               {"id": "x", "kind": "open", "template": "X?", "default_target": "END"}"#,
            r#"{"name": "p", "kind": "boolean"}, {"name": "q", "kind": "boolean"}"#,
        );
        let report = validate_flow(&f);
        assert_eq!(report.findings.len(), 1, "{:?}", report.findings);
        assert_eq!(report.findings[0].code, FindingCode::UnreachableNode);
        assert_eq!(report.findings[0].location, "nodes[2]");
    }

    #[test]
    fn numeric_thresholds_are_covered() {
        let f = flow(
            r#"{"id": "a", "kind": "open", "template": "A?", "default_target": "END",
                "branch_rules": [{"when": "age >= 65", "target": "s"}, {"when": "age < 18", "target": "y"}]},
               {"id": "s", "kind": "open", "template": "S?", "default_target": "END"},
               {"id": "y", "kind": "open", "template": "Y?", "default_target": "END"}"#,
            r#"{"name": "age", "kind": "number"}"#,
        );
        assert!(validate_flow(&f).is_clean());
    }

    #[test]
    fn cycle_and_structured_budget() {
        let f = flow(
            r#"{"id": "a", "kind": "open", "template": "A?", "default_target": "b"},
               {"id": "b", "kind": "open", "template": "B?", "default_target": "a"}"#,
            "",
        );
        assert!(validate_flow(&f).has(FindingCode::Cycle));

        let mut s = flow(r#"{"id": "a", "kind": "open", "template": "A?", "default_target": "END"}"#, "");
        s.mode = FlowMode::Structured;
        assert!(validate_flow(&s).has(FindingCode::StructuredClarification));
    }

    #[test]
    fn enum_literal_outside_values_is_type_error() {
        let f = flow(
            r#"{"id": "a", "kind": "open", "template": "A?", "default_target": "END",
                "branch_rules": [{"when": "mode == \"boat\"", "target": "END"}]}"#,
            r#"{"name": "mode", "kind": "enum", "values": ["bike", "car"]}"#,
        );
        assert!(validate_flow(&f).has(FindingCode::TypeError));
    }
}
