//! Analysis over finished sessions: per-question summaries, keyword themes, quality
//! filtering, prompt-perturbation sensitivity and memory-strategy token comparison.

mod memory;
mod sensitivity;
mod themes;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{EntryKind, SessionState, SessionStatus};
use crate::flow::{FlowDefinition, NodeKind, END};

pub use memory::{compare_memory_strategies, MemoryComparison, MemoryRow};
pub use sensitivity::{
    is_valid_question, load_plan, render_sensitivity_table, run_outcomes, run_sensitivity, total_variation, PairDivergence, PerturbationPlan,
    SensitivityError, SensitivityReport, Variant, VariantReport, NOT_ASKED,
};
pub use themes::{keyword_themes, ThemeTable};

/// What happened at one node of a session.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeOutcome {
    pub node: String,
    pub question: String,
    /// Participant text for the node, joined with spaces.
    pub response: String,
    pub answered: bool,
    pub open: bool,
    pub identity: bool,
    pub paraphrase: Option<String>,
    pub clarifications: u32,
    /// Last sufficiency verdict was 0.
    pub unresolved: bool,
}

/// Per-node outcomes in visit order.
pub fn node_outcomes(state: &SessionState, flow: Option<&FlowDefinition>) -> Vec<NodeOutcome> {
    let mut order: Vec<String> = Vec::new();
    let mut by_node: BTreeMap<String, NodeOutcome> = BTreeMap::new();
    for e in &state.transcript {
        if e.node.is_empty() || e.node == END {
            continue;
        }
        if e.kind == EntryKind::Question && !by_node.contains_key(&e.node) {
            let node = flow.and_then(|f| f.node(&e.node));
            order.push(e.node.clone());
            by_node.insert(
                e.node.clone(),
                NodeOutcome {
                    node: e.node.clone(),
                    question: e.text.clone(),
                    response: String::new(),
                    answered: false,
                    open: node.is_none_or(|n| n.kind == NodeKind::Open),
                    identity: node.is_some_and(|n| n.identity_optin),
                    paraphrase: None,
                    clarifications: 0,
                    unresolved: false,
                },
            );
            continue;
        }
        let Some(o) = by_node.get_mut(&e.node) else { continue };
        match e.kind {
            EntryKind::Response | EntryKind::ClarificationResponse => {
                let t = e.text.trim();
                if !t.is_empty() {
                    if !o.response.is_empty() {
                        o.response.push(' ');
                    }
                    o.response.push_str(t);
                    o.answered = true;
                }
            }
            EntryKind::AgentParaphrase => o.paraphrase = Some(e.text.clone()),
            EntryKind::ClarificationQuestion => o.clarifications += 1,
            _ => {}
        }
    }
    for (node, v) in state.last_verdicts() {
        if let Some(o) = by_node.get_mut(node) {
            o.unresolved = v.xi == 0;
        }
    }
    order.into_iter().filter_map(|n| by_node.remove(&n)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityRule {
    pub min_answered_fraction: f64,
    /// Mean characters per answered open question.
    pub min_open_response_chars: usize,
    pub max_unresolved_clarifications: u32,
}

impl Default for QualityRule {
    fn default() -> Self {
        Self { min_answered_fraction: 0.8, min_open_response_chars: 20, max_unresolved_clarifications: 2 }
    }
}

impl QualityRule {
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.min_answered_fraction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QualityReason {
    AnsweredFraction,
    OpenResponseChars,
    UnresolvedClarifications,
}

impl QualityReason {
    pub fn as_str(self) -> &'static str {
        match self {
            QualityReason::AnsweredFraction => "ANSWERED_FRACTION",
            QualityReason::OpenResponseChars => "OPEN_RESPONSE_CHARS",
            QualityReason::UnresolvedClarifications => "UNRESOLVED_CLARIFICATIONS",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityAssessment {
    pub answered_fraction: f64,
    pub mean_open_chars: f64,
    pub unresolved_clarifications: u32,
    pub reasons: Vec<QualityReason>,
}

/// Scores a session against `rule`.
///
/// Answered fraction is over visited nodes for completed sessions and over the larger of
/// visited nodes and flow size otherwise, so early abandonment counts against it.
pub fn assess(state: &SessionState, flow: Option<&FlowDefinition>, rule: &QualityRule) -> QualityAssessment {
    let outcomes: Vec<NodeOutcome> = node_outcomes(state, flow).into_iter().filter(|o| !o.identity).collect();
    let visited = outcomes.len();
    let denominator = if state.status == SessionStatus::Completed || flow.is_none() {
        visited
    } else {
        let size = flow.map_or(0, |f| {
            if f.mode == crate::flow::FlowMode::Unstructured {
                f.config.max_questions as usize
            } else {
                f.nodes.iter().filter(|n| !n.identity_optin).count()
            }
        });
        visited.max(size)
    };
    let answered = outcomes.iter().filter(|o| o.answered).count();
    let answered_fraction = if denominator == 0 { 0.0 } else { answered as f64 / denominator as f64 };
    let open: Vec<&NodeOutcome> = outcomes.iter().filter(|o| o.open && o.answered).collect();
    let any_open = outcomes.iter().any(|o| o.open);
    let mean_open_chars = if open.is_empty() {
        0.0
    } else {
        open.iter().map(|o| o.response.chars().count()).sum::<usize>() as f64 / open.len() as f64
    };
    let unresolved_clarifications = outcomes.iter().filter(|o| o.unresolved).count() as u32;
    let mut reasons = Vec::new();
    if answered_fraction < rule.min_answered_fraction {
        reasons.push(QualityReason::AnsweredFraction);
    }
    if any_open && mean_open_chars < rule.min_open_response_chars as f64 {
        reasons.push(QualityReason::OpenResponseChars);
    }
    if unresolved_clarifications > rule.max_unresolved_clarifications {
        reasons.push(QualityReason::UnresolvedClarifications);
    }
    QualityAssessment { answered_fraction, mean_open_chars, unresolved_clarifications, reasons }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityPartition {
    pub accepted: Vec<String>,
    pub rejected: Vec<(String, Vec<QualityReason>)>,
}

/// Splits sessions (by id) into accepted and rejected with reasons.
pub fn quality_filter(states: &[SessionState], flows: &[FlowDefinition], rule: &QualityRule) -> QualityPartition {
    let mut out = QualityPartition { accepted: Vec::new(), rejected: Vec::new() };
    for st in states {
        let flow = flows.iter().find(|f| f.id == st.flow_id);
        let a = assess(st, flow, rule);
        if a.reasons.is_empty() {
            out.accepted.push(st.session_id.clone());
        } else {
            out.rejected.push((st.session_id.clone(), a.reasons));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SummarySource {
    Paraphrase,
    Summarizer,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticipantSummary {
    pub session_id: String,
    pub text: String,
    pub source: SummarySource,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct QuestionSummaries {
    pub by_question: BTreeMap<String, Vec<ParticipantSummary>>,
    pub notes: Vec<String>,
}

impl QuestionSummaries {
    pub fn texts(&self) -> BTreeMap<String, Vec<String>> {
        self.by_question
            .iter()
            .map(|(q, v)| (q.clone(), v.iter().map(|s| s.text.clone()).collect()))
            .collect()
    }
}

pub type Summarize<'a> = dyn FnMut(&str, &str) -> Result<String, String> + 'a;

/// One summary per answered (question, participant): the stored paraphrase, else the
/// summarizer given `(question, response)`, else the raw response.
pub fn summarize_by_question(states: &[SessionState], mut summarizer: Option<&mut Summarize<'_>>) -> QuestionSummaries {
    let mut out = QuestionSummaries::default();
    for st in states {
        for o in node_outcomes(st, None).into_iter().filter(|o| o.answered) {
            let (text, source) = match (&o.paraphrase, summarizer.as_mut()) {
                (Some(p), _) => (p.clone(), SummarySource::Paraphrase),
                (None, Some(f)) => match f(&o.question, &o.response) {
                    Ok(t) => (t, SummarySource::Summarizer),
                    Err(e) => {
                        out.notes.push(format!("{} / {}: summarizer failed, raw response kept: {e}", st.session_id, o.node));
                        (o.response.clone(), SummarySource::Raw)
                    }
                },
                (None, None) => (o.response.clone(), SummarySource::Raw),
            };
            out.by_question.entry(o.node).or_default().push(ParticipantSummary {
                session_id: st.session_id.clone(),
                text,
                source,
            });
        }
    }
    out
}
