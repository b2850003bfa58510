//! Random flow shapes for property tests, each with an independent reference walk.

use proptest::prelude::*;
use serde_json::{json, Value as Json};

/// Index `n` stands for END in a flow of `n` nodes.
fn target_name(t: usize, n: usize) -> String {
    if t >= n {
        "END".into()
    } else {
        format!("n{t}")
    }
}

/// Picks a forward target from node `i` out of `raw`.
fn forward(i: usize, n: usize, raw: u8) -> usize {
    i + 1 + usize::from(raw) % (n - i)
}

#[derive(Debug, Clone)]
pub struct BudgetNode {
    pub discrete: bool,
    pub budget: u32,
    pub default: u8,
    /// Constant-predicate rules: (fires, raw target).
    pub rules: Vec<(bool, u8)>,
}

#[derive(Debug, Clone)]
pub struct BudgetFlow {
    pub nodes: Vec<BudgetNode>,
    pub summarize: bool,
}

pub fn budget_flow() -> impl Strategy<Value = BudgetFlow> {
    let node = (any::<bool>(), 0u32..=2, any::<u8>(), prop::collection::vec((any::<bool>(), any::<u8>()), 0..3))
        .prop_map(|(discrete, budget, default, rules)| BudgetNode { discrete, budget, default, rules });
    (prop::collection::vec(node, 1..=6), any::<bool>()).prop_map(|(nodes, summarize)| BudgetFlow { nodes, summarize })
}

impl BudgetFlow {
    pub fn to_json(&self) -> String {
        let n = self.nodes.len();
        let nodes: Vec<Json> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                let rules: Vec<Json> = node
                    .rules
                    .iter()
                    .map(|(fires, t)| json!({"when": fires.to_string(), "target": target_name(forward(i, n, *t), n)}))
                    .collect();
                let mut doc = json!({
                    "id": format!("n{i}"),
                    "kind": if node.discrete { "discrete" } else { "open" },
                    "template": format!("Question {i}?"),
                    "max_clarifications": node.budget,
                    "branch_rules": rules,
                    "default_target": target_name(forward(i, n, node.default), n),
                });
                if node.discrete {
                    doc["options"] = json!([{"id": "a", "label": "Alpha"}, {"id": "b", "label": "Beta"}]);
                }
                doc
            })
            .collect();
        let mut bindings = json!({"sufficiency_judge": "s", "clarifier": "s", "intent_matcher": "s"});
        if self.summarize {
            bindings["summarizer"] = json!("s");
        }
        json!({"id": "budget", "version": "1", "mode": "semi_structured", "languages": ["en"],
               "config": {"model_bindings": bindings}, "nodes": nodes})
        .to_string()
    }

    /// Node indices visited: first firing rule, else the default.
    pub fn path(&self) -> Vec<usize> {
        let n = self.nodes.len();
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            out.push(i);
            let node = &self.nodes[i];
            i = node.rules.iter().find(|(fires, _)| *fires).map_or(forward(i, n, node.default), |(_, t)| forward(i, n, *t));
        }
        out
    }

    /// Agent question turns when every answer is judged insufficient.
    pub fn expected_question_turns(&self) -> usize {
        self.path().iter().map(|&i| 1 + self.nodes[i].budget as usize).sum()
    }
}

/// Finite domain of one variable: boolean or an enum with `k` values.
#[derive(Debug, Clone, Copy)]
pub enum Domain {
    Bool,
    Enum(usize),
}

impl Domain {
    pub fn size(self) -> usize {
        match self {
            Domain::Bool => 2,
            Domain::Enum(k) => k,
        }
    }

    /// Option id for value index `v`.
    pub fn option(self, v: usize) -> String {
        match self {
            Domain::Bool => v.is_multiple_of(2).to_string(),
            Domain::Enum(k) => format!("v{}", v % k),
        }
    }

    fn literal(self, v: usize) -> String {
        match self {
            Domain::Bool => self.option(v),
            Domain::Enum(_) => format!("\"{}\"", self.option(v)),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Pred {
    Eq(usize, usize),
    Ne(usize, usize),
    In(usize, Vec<usize>),
    Not(Box<Pred>),
    And(Box<Pred>, Box<Pred>),
    Or(Box<Pred>, Box<Pred>),
}

fn pred() -> impl Strategy<Value = Pred> {
    let leaf = prop_oneof![
        (0usize..4, 0usize..3).prop_map(|(x, v)| Pred::Eq(x, v)),
        (0usize..4, 0usize..3).prop_map(|(x, v)| Pred::Ne(x, v)),
        (0usize..4, prop::collection::vec(0usize..3, 1..3)).prop_map(|(x, vs)| Pred::In(x, vs)),
    ];
    leaf.prop_recursive(3, 12, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|p| Pred::Not(Box::new(p))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Pred::And(Box::new(a), Box::new(b))),
            (inner.clone(), inner).prop_map(|(a, b)| Pred::Or(Box::new(a), Box::new(b))),
        ]
    })
}

impl Pred {
    pub fn render(&self, domains: &[Domain]) -> String {
        let var = |x: &usize| x % domains.len();
        match self {
            Pred::Eq(x, v) => format!("x{} == {}", var(x), domains[var(x)].literal(*v)),
            Pred::Ne(x, v) => format!("x{} != {}", var(x), domains[var(x)].literal(*v)),
            Pred::In(x, vs) => {
                let d = domains[var(x)];
                let items: Vec<String> = vs.iter().map(|v| d.literal(*v)).collect();
                format!("x{} in [{}]", var(x), items.join(", "))
            }
            Pred::Not(p) => format!("not ({})", p.render(domains)),
            Pred::And(a, b) => format!("({}) and ({})", a.render(domains), b.render(domains)),
            Pred::Or(a, b) => format!("({}) or ({})", a.render(domains), b.render(domains)),
        }
    }

    /// `None` when a referenced variable is unbound; both sides of and/or are always evaluated.
    pub fn eval(&self, domains: &[Domain], x: &[Option<usize>]) -> Option<bool> {
        let var = |i: &usize| i % domains.len();
        let same = |i: &usize, v: &usize| x[var(i)].map(|cur| cur == v % domains[var(i)].size());
        match self {
            Pred::Eq(i, v) => same(i, v),
            Pred::Ne(i, v) => same(i, v).map(|b| !b),
            Pred::In(i, vs) => {
                let cur = x[var(i)]?;
                Some(vs.iter().any(|v| v % domains[var(i)].size() == cur))
            }
            Pred::Not(p) => p.eval(domains, x).map(|b| !b),
            Pred::And(a, b) => {
                let (l, r) = (a.eval(domains, x)?, b.eval(domains, x)?);
                Some(l && r)
            }
            Pred::Or(a, b) => {
                let (l, r) = (a.eval(domains, x)?, b.eval(domains, x)?);
                Some(l || r)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BranchNode {
    pub rules: Vec<(Pred, u8)>,
    pub default: u8,
}

/// One discrete node per variable; node `i` sets `x{i}`.
#[derive(Debug, Clone)]
pub struct BranchFlow {
    pub domains: Vec<Domain>,
    pub nodes: Vec<BranchNode>,
}

pub fn branch_flow() -> impl Strategy<Value = BranchFlow> {
    let domain = prop_oneof![Just(Domain::Bool), (2usize..=3).prop_map(Domain::Enum)];
    prop::collection::vec(domain, 1..=4).prop_flat_map(|domains| {
        let node = (prop::collection::vec((pred(), any::<u8>()), 0..=3), any::<u8>())
            .prop_map(|(rules, default)| BranchNode { rules, default });
        let n = domains.len();
        (Just(domains), prop::collection::vec(node, n)).prop_map(|(domains, nodes)| BranchFlow { domains, nodes })
    })
}

impl BranchFlow {
    pub fn to_json(&self) -> String {
        let n = self.nodes.len();
        let variables: Vec<Json> = self
            .domains
            .iter()
            .enumerate()
            .map(|(i, d)| match d {
                Domain::Bool => json!({"name": format!("x{i}"), "kind": "boolean"}),
                Domain::Enum(k) => {
                    json!({"name": format!("x{i}"), "kind": "enum", "values": (0..*k).map(|v| format!("v{v}")).collect::<Vec<_>>()})
                }
            })
            .collect();
        let nodes: Vec<Json> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                let d = self.domains[i];
                let options: Vec<Json> =
                    (0..d.size()).map(|v| json!({"id": d.option(v), "label": format!("Choice {v}")})).collect();
                let rules: Vec<Json> = node
                    .rules
                    .iter()
                    .map(|(p, t)| json!({"when": p.render(&self.domains), "target": target_name(forward(i, n, *t), n)}))
                    .collect();
                json!({
                    "id": format!("n{i}"), "kind": "discrete", "template": format!("Pick x{i}?"),
                    "options": options, "extract": [format!("x{i}")], "branch_rules": rules,
                    "default_target": target_name(forward(i, n, node.default), n),
                })
            })
            .collect();
        json!({"id": "branch", "version": "1", "mode": "structured", "languages": ["en"],
               "variables": variables, "nodes": nodes})
        .to_string()
    }

    /// Every assignment of value indices, in lexicographic order.
    pub fn assignments(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for d in &self.domains {
            out = out.into_iter().flat_map(|a| (0..d.size()).map(move |v| [a.clone(), vec![v]].concat())).collect();
        }
        out
    }

    /// Brute-force first-match walk for one assignment.
    pub fn path(&self, assignment: &[usize]) -> Vec<usize> {
        let n = self.nodes.len();
        let mut bound: Vec<Option<usize>> = vec![None; n];
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            out.push(i);
            bound[i] = Some(assignment[i]);
            let node = &self.nodes[i];
            i = node
                .rules
                .iter()
                .find(|(p, _)| p.eval(&self.domains, &bound) == Some(true))
                .map_or(forward(i, n, node.default), |(_, t)| forward(i, n, *t));
        }
        out
    }
}
