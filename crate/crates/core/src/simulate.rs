//! Simulated participants with fixed behaviors, for exercising flows before fieldwork.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EngineAction, EngineError, Input, LogicalClock, Phase, SessionState, CONTINUE};
use crate::flow::{ConfigOverrides, FlowDefinition, FlowMode, ModelRole, NodeKind};
use crate::gateway::{hint, Backend, BackendError, BackendReply, Gateway, Locality, ModelRequest, RuleBackend};

/// Backend id every role is bound to during simulation.
pub const SIM_ID: &str = "sim";

pub const TERSE_FIRST: &str = "ok";
pub const TERSE_AFTER: &str = "ok, mostly by bus I guess";
pub const ERRATIC_TEXT: &str = "qwfp zxcv";
pub const OFF_TOPIC_TEXT: &str = "Can you tell me a joke instead?";
pub const DEFAULT_ANSWER: &str = "I usually take the bus because it is cheap and reliable for my daily commute.";

const MAX_TURNS: usize = 500;

/// How a simulated participant answers.
///
/// The simulation judge is scripted per behavior: cooperative answers are always
/// sufficient, a terse first answer is insufficient and its follow-up sufficient,
/// erratic answers are never sufficient and off-topic answers are always off-topic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Cooperative,
    Terse,
    Erratic,
    OffTopic,
}

impl Behavior {
    pub fn as_str(self) -> &'static str {
        match self {
            Behavior::Cooperative => "cooperative",
            Behavior::Terse => "terse",
            Behavior::Erratic => "erratic",
            Behavior::OffTopic => "off_topic",
        }
    }

    /// Clarification turns spent at one node with budget `k`.
    pub fn expected_clarifications(self, k: u32) -> u32 {
        match self {
            Behavior::Cooperative => 0,
            Behavior::Terse => k.min(1),
            Behavior::Erratic | Behavior::OffTopic => k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Persona {
    pub name: String,
    pub behavior: Behavior,
    /// Open-question answers by node id.
    #[serde(default)]
    pub responses: BTreeMap<String, String>,
    /// Option ids by node id; the first non-"other" option otherwise.
    #[serde(default)]
    pub choices: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonaFile {
    pub personas: Vec<Persona>,
    #[serde(default)]
    pub seed: u64,
}

impl PersonaFile {
    pub fn parse(json: &str) -> Result<Self, String> {
        let file: PersonaFile = serde_json::from_str(json).map_err(|e| e.to_string())?;
        if file.personas.is_empty() {
            return Err("persona file lists no personas".into());
        }
        let mut names: Vec<&str> = file.personas.iter().map(|p| p.name.as_str()).collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(format!("duplicate persona `{}`", w[0]));
        }
        Ok(file)
    }
}

struct SimBackend {
    behavior: Behavior,
    rules: RuleBackend,
}

impl Backend for SimBackend {
    fn id(&self) -> &str {
        SIM_ID
    }

    fn locality(&self) -> Locality {
        Locality::Local
    }

    fn complete(&self, req: &ModelRequest) -> Result<BackendReply, BackendError> {
        let response = req.hints.get(hint::RESPONSE).map(String::as_str).unwrap_or("");
        let text = match (req.role, self.behavior) {
            (ModelRole::SufficiencyJudge, Behavior::Cooperative) => "1",
            (ModelRole::SufficiencyJudge, Behavior::Terse) => {
                if response.trim() == TERSE_FIRST {
                    "0"
                } else {
                    "1"
                }
            }
            (ModelRole::SufficiencyJudge, Behavior::Erratic) => "0",
            (ModelRole::SufficiencyJudge | ModelRole::IntentMatcher, Behavior::OffTopic) => "OFFTOPIC",
            (ModelRole::IntentMatcher, Behavior::Erratic) => "NONE",
            _ => return self.rules.complete(req),
        };
        Ok(BackendReply { text: text.into(), prompt_tokens: None, completion_tokens: None })
    }
}

/// One simulated session.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRun {
    pub persona: String,
    pub run: u32,
    pub completed: bool,
    pub turns: u32,
    pub nodes: u32,
    pub clarifications: u32,
    /// Clarifications spent per visited node, in visit order.
    pub per_node: Vec<(String, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PersonaMetrics {
    pub persona: String,
    pub behavior: Behavior,
    pub sessions: u32,
    pub completion_rate: f64,
    pub mean_turns: f64,
    /// Clarification turns per visited node.
    pub clarification_rate: f64,
    pub clarifications: u32,
    pub nodes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub personas: Vec<PersonaMetrics>,
    pub runs: Vec<SimRun>,
    pub overall_clarification_rate: f64,
    pub overall_completion_rate: f64,
}

fn bindings(flow: &FlowDefinition) -> BTreeMap<ModelRole, String> {
    let mut roles: Vec<ModelRole> = flow.config.model_bindings.keys().copied().collect();
    roles.push(ModelRole::IntentMatcher);
    if flow.mode != FlowMode::Structured {
        roles.push(ModelRole::SufficiencyJudge);
    }
    roles.into_iter().filter(|r| *r != ModelRole::PiiScreener).map(|r| (r, SIM_ID.to_string())).collect()
}

fn next_input(flow: &FlowDefinition, st: &SessionState, persona: &Persona) -> Input {
    if matches!(st.phase, Phase::AwaitParaphraseAck | Phase::AwaitVoluntaryAdd) {
        return Input::Choice(CONTINUE.into());
    }
    let node = flow.node(&st.current_node).or(flow.nodes.first());
    let free_text = matches!(st.phase, Phase::AwaitOtherText | Phase::AwaitOtherClarification);
    let first_try = st.phase == Phase::AwaitResponse;
    match persona.behavior {
        Behavior::Erratic => Input::Text(ERRATIC_TEXT.into()),
        Behavior::OffTopic => Input::Text(OFF_TOPIC_TEXT.into()),
        Behavior::Cooperative | Behavior::Terse => match node {
            Some(n) if n.kind == NodeKind::Discrete && !free_text => {
                let choice = persona.choices.get(&n.id).cloned().or_else(|| {
                    n.options.iter().find(|o| !o.other).or(n.options.first()).map(|o| o.id.clone())
                });
                Input::Choice(choice.unwrap_or_default())
            }
            _ if persona.behavior == Behavior::Terse => {
                Input::Text(if first_try { TERSE_FIRST } else { TERSE_AFTER }.into())
            }
            _ => Input::Text(persona.responses.get(&st.current_node).cloned().unwrap_or_else(|| DEFAULT_ANSWER.into())),
        },
    }
}

/// Runs one persona through the flow until completion or the turn cap.
pub fn simulate_one(flow: &FlowDefinition, persona: &Persona, run: u32, seed: u64) -> Result<SimRun, EngineError> {
    let gateway = Gateway::new();
    gateway.register(Arc::new(SimBackend { behavior: persona.behavior, rules: RuleBackend::new(SIM_ID) }));
    let engine = Engine::new(Arc::new(gateway)).with_clock(Arc::new(LogicalClock));
    let overrides = ConfigOverrides { model_bindings: Some(bindings(flow)), seed: Some(seed), ..Default::default() };
    let id = format!("{}-{run}", persona.name);
    let (mut st, mut action) = engine.start_session_with_id(flow, &overrides, None, id)?;
    let mut per_node: Vec<(String, u32)> = Vec::new();
    let mut turns = 0;
    while !matches!(action, EngineAction::Complete { .. }) && st.is_active() && turns < MAX_TURNS {
        let node = st.current_node.clone();
        let input = next_input(flow, &st, persona);
        action = engine.ingest(flow, &mut st, input)?;
        turns += 1;
        let spent = st.clarifications_used.get(&node).copied().unwrap_or(0);
        match per_node.last_mut() {
            Some((n, c)) if *n == node => *c = spent,
            _ => per_node.push((node, spent)),
        }
    }
    let clarifications = per_node.iter().map(|(_, c)| c).sum();
    Ok(SimRun {
        persona: persona.name.clone(),
        run,
        completed: st.status == crate::engine::SessionStatus::Completed,
        turns: turns as u32,
        nodes: per_node.len() as u32,
        clarifications,
        per_node,
    })
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Runs every persona `n` times; runs are independent and reported sorted by persona and run.
pub fn simulate(flow: &FlowDefinition, personas: &PersonaFile, n: u32) -> Result<SimReport, EngineError> {
    let mut sorted: Vec<&Persona> = personas.personas.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let results: Vec<Result<Vec<SimRun>, EngineError>> = std::thread::scope(|s| {
        let handles: Vec<_> = sorted
            .iter()
            .map(|p| {
                s.spawn(move || {
                    (0..n).map(|r| simulate_one(flow, p, r, personas.seed.wrapping_add(u64::from(r)))).collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    let mut runs = Vec::new();
    for r in results {
        runs.extend(r?);
    }
    let mut metrics = Vec::new();
    for p in &sorted {
        let mine: Vec<&SimRun> = runs.iter().filter(|r| r.persona == p.name).collect();
        let sessions = mine.len() as u32;
        let clarifications: u32 = mine.iter().map(|r| r.clarifications).sum();
        let nodes: u32 = mine.iter().map(|r| r.nodes).sum();
        metrics.push(PersonaMetrics {
            persona: p.name.clone(),
            behavior: p.behavior,
            sessions,
            completion_rate: ratio(mine.iter().filter(|r| r.completed).count() as f64, f64::from(sessions)),
            mean_turns: ratio(mine.iter().map(|r| f64::from(r.turns)).sum(), f64::from(sessions)),
            clarification_rate: ratio(f64::from(clarifications), f64::from(nodes)),
            clarifications,
            nodes,
        });
    }
    let total_nodes: u32 = runs.iter().map(|r| r.nodes).sum();
    let total_clar: u32 = runs.iter().map(|r| r.clarifications).sum();
    Ok(SimReport {
        overall_clarification_rate: ratio(f64::from(total_clar), f64::from(total_nodes)),
        overall_completion_rate: ratio(runs.iter().filter(|r| r.completed).count() as f64, runs.len() as f64),
        personas: metrics,
        runs,
    })
}

/// Fixed-width table of per-persona metrics.
pub fn render_table(report: &SimReport) -> String {
    let mut out = format!(
        "{:<16} {:<12} {:>8} {:>10} {:>10} {:>14}\n",
        "persona", "behavior", "sessions", "completed", "turns", "clarif/node"
    );
    for m in &report.personas {
        out.push_str(&format!(
            "{:<16} {:<12} {:>8} {:>10.3} {:>10.2} {:>14.3}\n",
            m.persona,
            m.behavior.as_str(),
            m.sessions,
            m.completion_rate,
            m.mean_turns,
            m.clarification_rate
        ));
    }
    out.push_str(&format!(
        "{:<16} {:<12} {:>8} {:>10.3} {:>10} {:>14.3}\n",
        "all",
        "",
        report.runs.len(),
        report.overall_completion_rate,
        "",
        report.overall_clarification_rate
    ));
    out
}
