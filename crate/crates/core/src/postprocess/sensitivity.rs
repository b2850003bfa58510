use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, EntryKind, SessionState};
use crate::flow::{parse_flow, ConfigOverrides, FlowDefinition, NodeKind, PromptTemplate, QuestionText};
use crate::gateway::Fixture;
use crate::replay::{replay, ReplayOptions};

/// Outcome recorded for a question a run never reached.
pub const NOT_ASKED: &str = "<not-asked>";

#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub overrides: ConfigOverrides,
    pub system_prompt: Option<String>,
    /// Replacement question text per node id.
    pub templates: BTreeMap<String, String>,
    /// Fixture for this variant instead of the plan's.
    pub script: Option<Fixture>,
}

#[derive(Debug, Clone)]
pub struct PerturbationPlan {
    pub flow: FlowDefinition,
    pub script: Fixture,
    pub variants: Vec<Variant>,
    pub runs_per_variant: u32,
    /// Run `r` uses seed `base_seed + r` unless the variant fixes one.
    pub base_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensitivityError {
    #[error("a plan needs at least two variants")]
    TooFewVariants,
    #[error("duplicate variant label `{0}`")]
    DuplicateLabel(String),
    #[error("runs_per_variant must be positive")]
    NoRuns,
    #[error("variant `{label}` replaces unknown node `{node}`")]
    UnknownNode { label: String, node: String },
    #[error("variant `{label}`: {reason}")]
    BadTemplate { label: String, reason: String },
    #[error("every run of every variant produced an invalid question")]
    AllRunsInvalid,
    #[error("variant `{label}` run {run}: {source}")]
    Engine { label: String, run: u32, source: EngineError },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantReport {
    pub label: String,
    pub runs: u32,
    pub valid_runs: u32,
    pub excluded_runs: u32,
    pub validity_rate: f64,
    /// Outcome histogram per question over valid runs.
    pub histograms: BTreeMap<String, BTreeMap<String, u32>>,
    /// Share of sufficiency verdicts equal to 1 over valid runs.
    pub verdict_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairDivergence {
    pub a: String,
    pub b: String,
    /// `None` when either side has no valid run.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub variants: Vec<VariantReport>,
    pub pairs: Vec<PairDivergence>,
    pub total_runs: u32,
    pub excluded_runs: u32,
}

impl SensitivityReport {
    pub fn delta(&self, a: &str, b: &str) -> Option<f64> {
        self.pairs
            .iter()
            .find(|p| (p.a == a && p.b == b) || (p.a == b && p.b == a))
            .and_then(|p| p.delta)
    }
}

/// A realized question is usable when it is nonempty and ends with a question mark.
pub fn is_valid_question(text: &str) -> bool {
    let t = text.trim().trim_matches(|c: char| c == '"' || c == '*' || c == '\u{201d}' || c.is_whitespace());
    !t.is_empty() && t.ends_with('?')
}

/// Canonical outcome per flow node for one finished run.
pub fn run_outcomes(state: &SessionState, flow: &FlowDefinition) -> BTreeMap<String, String> {
    let visited: BTreeSet<&str> = state.visited_nodes().into_iter().collect();
    let verdicts = state.last_verdicts();
    let mut ids: Vec<String> = flow.nodes.iter().map(|n| n.id.clone()).collect();
    if flow.mode == crate::flow::FlowMode::Unstructured {
        ids = visited.iter().map(|s| s.to_string()).collect();
    }
    let mut out = BTreeMap::new();
    for id in ids {
        if !visited.contains(id.as_str()) {
            out.insert(id, NOT_ASKED.to_string());
            continue;
        }
        let node = flow.node(&id).unwrap_or(&flow.nodes[0]);
        let mut parts: Vec<String> = node
            .extract
            .iter()
            .map(|v| {
                let value = state.variables.get(v).map(|x| x.to_string()).unwrap_or_else(|| "null".into());
                format!("{v}={value}")
            })
            .collect();
        if node.kind == NodeKind::Discrete {
            if let Some(choice) =
                state.transcript.iter().find(|e| e.node == id && e.kind == EntryKind::Response).map(|e| e.text.clone())
            {
                parts.push(format!("choice={choice}"));
            }
        }
        if let Some(v) = verdicts.get(id.as_str()) {
            parts.push(format!("xi={}", v.xi));
        }
        out.insert(id, parts.join(";"));
    }
    out
}

/// Total-variation distance between two count histograms.
pub fn total_variation(a: &BTreeMap<String, u32>, b: &BTreeMap<String, u32>) -> f64 {
    let na: u32 = a.values().sum();
    let nb: u32 = b.values().sum();
    if na == 0 || nb == 0 {
        return if na == nb { 0.0 } else { 1.0 };
    }
    let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| {
            let pa = f64::from(a.get(k).copied().unwrap_or(0)) / f64::from(na);
            let pb = f64::from(b.get(k).copied().unwrap_or(0)) / f64::from(nb);
            (pa - pb).abs()
        })
        .sum::<f64>()
}

fn divergence(a: &VariantReport, b: &VariantReport) -> Option<f64> {
    if a.valid_runs == 0 || b.valid_runs == 0 {
        return None;
    }
    let questions: BTreeSet<&String> = a.histograms.keys().chain(b.histograms.keys()).collect();
    if questions.is_empty() {
        return Some(0.0);
    }
    let empty = BTreeMap::new();
    let sum: f64 = questions
        .iter()
        .map(|q| total_variation(a.histograms.get(*q).unwrap_or(&empty), b.histograms.get(*q).unwrap_or(&empty)))
        .sum();
    Some(sum / questions.len() as f64)
}

impl PerturbationPlan {
    pub fn check(&self) -> Result<(), SensitivityError> {
        if self.variants.len() < 2 {
            return Err(SensitivityError::TooFewVariants);
        }
        if self.runs_per_variant == 0 {
            return Err(SensitivityError::NoRuns);
        }
        let mut seen = BTreeSet::new();
        for v in &self.variants {
            if !seen.insert(v.label.as_str()) {
                return Err(SensitivityError::DuplicateLabel(v.label.clone()));
            }
            for node in v.templates.keys() {
                if self.flow.node(node).is_none() {
                    return Err(SensitivityError::UnknownNode { label: v.label.clone(), node: node.clone() });
                }
            }
        }
        Ok(())
    }

    fn variant_flow(&self, v: &Variant) -> Result<FlowDefinition, SensitivityError> {
        let mut flow = self.flow.clone();
        if let Some(p) = &v.system_prompt {
            flow.system_prompt = p.clone();
        }
        for (id, text) in &v.templates {
            let t = PromptTemplate::uniform(text, &flow.languages)
                .map_err(|e| SensitivityError::BadTemplate { label: v.label.clone(), reason: e.to_string() })?;
            if let Some(n) = flow.nodes.iter_mut().find(|n| &n.id == id) {
                n.question = QuestionText::Template(t);
            }
        }
        Ok(flow)
    }
}

/// Runs every variant `runs_per_variant` times and compares outcome distributions.
pub fn run_sensitivity(plan: &PerturbationPlan) -> Result<SensitivityReport, SensitivityError> {
    plan.check()?;
    let mut reports = Vec::new();
    for v in &plan.variants {
        let flow = plan.variant_flow(v)?;
        let script = v.script.as_ref().unwrap_or(&plan.script);
        let mut report = VariantReport {
            label: v.label.clone(),
            runs: plan.runs_per_variant,
            valid_runs: 0,
            excluded_runs: 0,
            validity_rate: 0.0,
            histograms: BTreeMap::new(),
            verdict_rate: None,
        };
        let (mut ones, mut verdicts) = (0u32, 0u32);
        for run in 0..plan.runs_per_variant {
            let mut overrides = v.overrides.clone();
            overrides.seed = Some(overrides.seed.unwrap_or(plan.base_seed.wrapping_add(u64::from(run))));
            let opts = ReplayOptions {
                overrides,
                strict: false,
                session_id: format!("{}-{run}", v.label),
                ..Default::default()
            };
            let outcome = replay(&flow, script, &opts).map_err(|source| SensitivityError::Engine {
                label: v.label.clone(),
                run,
                source,
            })?;
            let questions: Vec<&str> = outcome
                .state
                .transcript
                .iter()
                .filter(|e| e.kind == EntryKind::Question)
                .map(|e| e.text.as_str())
                .collect();
            if questions.is_empty() || !questions.iter().all(|q| is_valid_question(q)) {
                report.excluded_runs += 1;
                continue;
            }
            report.valid_runs += 1;
            for verdict in outcome.state.last_verdicts().values() {
                verdicts += 1;
                ones += u32::from(verdict.xi);
            }
            for (q, o) in run_outcomes(&outcome.state, &flow) {
                *report.histograms.entry(q).or_default().entry(o).or_insert(0) += 1;
            }
        }
        report.validity_rate = f64::from(report.valid_runs) / f64::from(report.runs);
        report.verdict_rate = (verdicts > 0).then(|| f64::from(ones) / f64::from(verdicts));
        reports.push(report);
    }
    if reports.iter().all(|r| r.valid_runs == 0) {
        return Err(SensitivityError::AllRunsInvalid);
    }
    let mut pairs = Vec::new();
    for i in 0..reports.len() {
        for j in i + 1..reports.len() {
            pairs.push(PairDivergence {
                a: reports[i].label.clone(),
                b: reports[j].label.clone(),
                delta: divergence(&reports[i], &reports[j]),
            });
        }
    }
    let total_runs = reports.iter().map(|r| r.runs).sum();
    let excluded_runs = reports.iter().map(|r| r.excluded_runs).sum();
    Ok(SensitivityReport { variants: reports, pairs, total_runs, excluded_runs })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VariantDoc {
    label: String,
    #[serde(default)]
    overrides: ConfigOverrides,
    #[serde(default)]
    system_prompt: Option<String>,
    #[serde(default)]
    templates: BTreeMap<String, String>,
    #[serde(default)]
    script: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanDoc {
    flow: String,
    script: String,
    variants: Vec<VariantDoc>,
    runs_per_variant: u32,
    #[serde(default)]
    base_seed: u64,
}

fn read_fixture(path: &Path) -> Result<Fixture, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Fixture::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Reads a plan file; flow and fixture paths are relative to the plan's directory.
pub fn load_plan(path: &Path) -> Result<PerturbationPlan, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let doc: PlanDoc = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let flow_path = base.join(&doc.flow);
    let flow_text = std::fs::read_to_string(&flow_path).map_err(|e| format!("{}: {e}", flow_path.display()))?;
    let flow = parse_flow(&flow_text).map_err(|e| format!("{}: {e}", flow_path.display()))?;
    let script = read_fixture(&base.join(&doc.script))?;
    let variants = doc
        .variants
        .into_iter()
        .map(|v| {
            Ok(Variant {
                label: v.label,
                overrides: v.overrides,
                system_prompt: v.system_prompt,
                templates: v.templates,
                script: v.script.map(|s| read_fixture(&base.join(s))).transpose()?,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(PerturbationPlan { flow, script, variants, runs_per_variant: doc.runs_per_variant, base_seed: doc.base_seed })
}

/// Per-variant validity and pairwise divergence as fixed-width text.
pub fn render_sensitivity_table(report: &SensitivityReport) -> String {
    let mut out = format!("{:<16} {:>6} {:>6} {:>9} {:>9} {:>9}\n", "variant", "runs", "valid", "excluded", "validity", "xi=1");
    for v in &report.variants {
        let rate = v.verdict_rate.map_or_else(|| "-".to_string(), |r| format!("{r:.3}"));
        out.push_str(&format!(
            "{:<16} {:>6} {:>6} {:>9} {:>9.3} {:>9}\n",
            v.label, v.runs, v.valid_runs, v.excluded_runs, v.validity_rate, rate
        ));
    }
    out.push_str(&format!("\n{:<16} {:<16} {:>8}\n", "a", "b", "delta"));
    for p in &report.pairs {
        let d = p.delta.map_or_else(|| "n/a".to_string(), |d| format!("{d:.4}"));
        out.push_str(&format!("{:<16} {:<16} {:>8}\n", p.a, p.b, d));
    }
    out.push_str(&format!("\nruns {} excluded {}\n", report.total_runs, report.excluded_runs));
    out
}
