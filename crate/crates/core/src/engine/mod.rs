//! Runs interview sessions: one participant input in, one agent action out.

pub mod prompts;
mod state;

use std::collections::{BTreeSet, HashSet};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::flow::{
    first_match, Binding, ConfigOverrides, FlowDefinition, FlowMode, KbKind, ModelRole, NodeKind, PromptTemplate,
    Provenance, QuestionNode, QuestionText, TemplateError, Value, VariableKind, VariableVector, END,
};
use crate::gateway::{hint, Gateway, GatewayError, LocalityRequirement, ModelRequest, ModelResponse};
use crate::knowledge::KnowledgeStore;
use crate::privacy;
use crate::text::{approx_tokens, truncate_chars};
use prompts::{CoerceError, Intent, Judgement};

pub use state::*;

/// Timestamps for transcript entries.
pub trait Clock: Send + Sync {
    fn stamp(&self, seq: usize) -> u64;
}

/// Wall-clock milliseconds since the Unix epoch.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn stamp(&self, _seq: usize) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// Timestamps derived from the entry position, for reproducible transcripts.
#[derive(Debug, Default, Clone, Copy)]
pub struct LogicalClock;

impl Clock for LogicalClock {
    fn stamp(&self, seq: usize) -> u64 {
        seq as u64 * 1000
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("language `{0}` is not declared by the flow")]
    InvalidLanguage(String),
    #[error("the flow has no nodes")]
    EmptyFlow,
    #[error("session is not active")]
    SessionNotActive,
    #[error("another input for this session is still being processed")]
    Busy,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("session belongs to flow `{0}`")]
    FlowMismatch(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
}

impl EngineError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, EngineError::Busy)
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Index into a variation pool for a node visit; fixed by seed, node id and visit number.
pub fn variation_index(seed: u64, node_id: &str, visit: usize, len: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(node_id) ^ (visit as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.random_range(0..len.max(1))
}

/// Renders a node's question without any model involvement.
pub fn realize_question(
    node: &QuestionNode,
    vars: &VariableVector,
    language: &str,
    seed: u64,
    visit: usize,
) -> Result<String, TemplateError> {
    let template = match &node.question {
        QuestionText::Template(t) => t,
        QuestionText::VariationPool(pool) => &pool[variation_index(seed, &node.id, visit, pool.len())],
    };
    template.render(vars, language)
}

struct InflightGuard<'a> {
    set: &'a Mutex<HashSet<String>>,
    id: String,
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        self.set.lock().unwrap().remove(&self.id);
    }
}

pub struct Engine {
    gateway: Arc<Gateway>,
    knowledge: Arc<KnowledgeStore>,
    clock: Arc<dyn Clock>,
    inflight: Mutex<HashSet<String>>,
}

impl Engine {
    pub fn new(gateway: Arc<Gateway>) -> Self {
        Self {
            gateway,
            knowledge: Arc::new(KnowledgeStore::new()),
            clock: Arc::new(SystemClock),
            inflight: Mutex::new(HashSet::new()),
        }
    }

    pub fn with_knowledge(mut self, knowledge: Arc<KnowledgeStore>) -> Self {
        self.knowledge = knowledge;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn knowledge(&self) -> &Arc<KnowledgeStore> {
        &self.knowledge
    }

    fn guard(&self, session_id: &str) -> Result<InflightGuard<'_>, EngineError> {
        if !self.inflight.lock().unwrap().insert(session_id.to_string()) {
            return Err(EngineError::Busy);
        }
        Ok(InflightGuard { set: &self.inflight, id: session_id.to_string() })
    }

    /// Opens a session with a fresh random id.
    pub fn start_session(
        &self,
        flow: &FlowDefinition,
        overrides: &ConfigOverrides,
        language: Option<&str>,
    ) -> Result<(SessionState, EngineAction), EngineError> {
        let id = format!("{:032x}", rand::random::<u128>());
        self.start_session_with_id(flow, overrides, language, id)
    }

    pub fn start_session_with_id(
        &self,
        flow: &FlowDefinition,
        overrides: &ConfigOverrides,
        language: Option<&str>,
        session_id: String,
    ) -> Result<(SessionState, EngineAction), EngineError> {
        let language = language.unwrap_or(flow.default_language()).to_string();
        if !flow.has_language(&language) {
            return Err(EngineError::InvalidLanguage(language));
        }
        let first = flow.nodes.first().ok_or(EngineError::EmptyFlow)?.id.clone();
        let mut config = overrides.apply(&flow.config);
        config.seed.get_or_insert_with(rand::random);
        let mut st = SessionState {
            session_id,
            flow_id: flow.id.clone(),
            flow_version: flow.version.clone(),
            mode: flow.mode,
            current_node: first.clone(),
            transcript: Vec::new(),
            variables: VariableVector::default(),
            clarifications_used: Default::default(),
            language,
            config,
            system_prompt: flow.system_prompt.clone(),
            status: SessionStatus::Active,
            turn_count: 0,
            phase: Phase::AwaitResponse,
            node_started_at: 0,
            other_started_at: None,
            verdicts: Vec::new(),
            questions_asked: 0,
            asked_entries: Vec::new(),
            pending_action: None,
        };
        let _guard = self.guard(&st.session_id)?;
        self.gateway.open_session(&st.session_id);
        let action = {
            let mut step = Step { engine: self, flow, st: &mut st, raw_last: None };
            if flow.mode == FlowMode::Unstructured {
                step.next_unstructured()
            } else {
                step.enter(&first)?
            }
        };
        st.pending_action = Some(action.clone());
        Ok((st, action))
    }

    /// Applies one participant input and returns the agent's next action.
    pub fn ingest(
        &self,
        flow: &FlowDefinition,
        st: &mut SessionState,
        input: Input,
    ) -> Result<EngineAction, EngineError> {
        let _guard = self.guard(&st.session_id)?;
        if !st.is_active() || st.phase == Phase::Done {
            return Err(EngineError::SessionNotActive);
        }
        if flow.id != st.flow_id {
            return Err(EngineError::FlowMismatch(st.flow_id.clone()));
        }
        let mut step = Step { engine: self, flow, st, raw_last: None };
        step.check_input(&input)?;
        step.st.turn_count += 1;
        let action = step.handle(input)?;
        st.pending_action = Some(action.clone());
        Ok(action)
    }

    /// Changes model settings or the system prompt from the next model call on.
    pub fn adjust(&self, st: &mut SessionState, overrides: &ConfigOverrides, system_prompt: Option<&str>) {
        let mut changes = Vec::new();
        if !overrides.is_empty() {
            st.config = overrides.apply(&st.config);
            changes.push(format!("config {}", serde_json::to_string(overrides).unwrap_or_default()));
        }
        if let Some(p) = system_prompt {
            st.system_prompt = p.to_string();
            changes.push("system prompt replaced".into());
        }
        if !changes.is_empty() {
            let text = format!("adjusted: {}", changes.join("; "));
            push_entry(self.clock.as_ref(), st, EntryKind::SystemNote, text);
        }
    }

    pub fn abandon(&self, st: &mut SessionState) {
        if st.is_active() {
            st.status = SessionStatus::Abandoned;
            st.phase = Phase::Done;
            push_entry(self.clock.as_ref(), st, EntryKind::SystemNote, "session abandoned".into());
        }
    }
}

fn push_entry(clock: &dyn Clock, st: &mut SessionState, kind: EntryKind, text: String) -> usize {
    let seq = st.transcript.len();
    st.transcript.push(TranscriptEntry {
        kind,
        node: st.current_node.clone(),
        token_count: approx_tokens(&text),
        timestamp: clock.stamp(seq),
        text,
    });
    seq
}

fn kind_name(kind: &VariableKind) -> &'static str {
    match kind {
        VariableKind::String => "string",
        VariableKind::Number => "number",
        VariableKind::Boolean => "boolean",
        VariableKind::Enum(_) => "enum",
    }
}

/// One engine step over a borrowed session.
struct Step<'a> {
    engine: &'a Engine,
    flow: &'a FlowDefinition,
    st: &'a mut SessionState,
    /// The current utterance before redaction, used only for this step's prompts.
    raw_last: Option<(usize, String)>,
}

impl<'a> Step<'a> {
    fn node(&self) -> &'a QuestionNode {
        if self.flow.mode == FlowMode::Unstructured {
            &self.flow.nodes[0]
        } else {
            self.flow.node(&self.st.current_node).unwrap_or(&self.flow.nodes[0])
        }
    }

    fn push(&mut self, kind: EntryKind, text: String) -> usize {
        let text = if kind.is_agent() && !self.node().identity_optin {
            self.strip_flagged(text)
        } else {
            text
        };
        push_entry(self.engine.clock.as_ref(), self.st, kind, text)
    }

    /// Removes substrings flagged earlier in the session from agent text, e.g. a name echoed by a local model.
    fn strip_flagged(&self, text: String) -> String {
        let known = self.engine.gateway.flagged(&self.st.session_id);
        let spans = privacy::spans_of(&text, &known);
        if spans.is_empty() {
            return text;
        }
        let verdict = privacy::PrivacyVerdict::clean().merge_model(spans);
        privacy::redact(&text, &verdict).map(|r| r.text).unwrap_or(text)
    }

    fn note(&mut self, text: impl Into<String>) {
        self.push(EntryKind::SystemNote, text.into());
    }

    fn render(&mut self, t: &PromptTemplate) -> String {
        let lang = if t.has_language(&self.st.language) {
            self.st.language.clone()
        } else {
            self.flow.default_language().to_string()
        };
        match t.render_lenient(&self.st.variables, &lang) {
            Ok((text, missing)) => {
                if !missing.is_empty() {
                    self.note(format!("unbound placeholders rendered empty: {}", missing.join(", ")));
                }
                text
            }
            Err(e) => {
                self.note(format!("template not rendered: {e}"));
                String::new()
            }
        }
    }

    fn bound(&self, role: ModelRole) -> bool {
        self.st.config.model_bindings.contains_key(&role)
    }

    fn call(&mut self, role: ModelRole, user_prompt: String, hints: &[(&str, String)]) -> Result<ModelResponse, GatewayError> {
        let locality = if self.node().identity_optin {
            LocalityRequirement::LocalOnly
        } else {
            LocalityRequirement::CloudEligible
        };
        let mut req = ModelRequest::new(role, &self.st.system_prompt, &user_prompt, locality);
        req.temperature = self.st.config.temperature;
        req.max_output_chars = self.st.config.max_output_chars;
        req.session_id = self.st.session_id.clone();
        req.seed = self.st.config.seed;
        req.turn = self.st.turn_count;
        for (k, v) in hints {
            req = req.hint(k, v.clone());
        }
        let result = self.engine.gateway.complete(req, &self.st.config);
        match &result {
            Ok(resp) => {
                for n in resp.notes.clone() {
                    self.note(n);
                }
            }
            Err(e) => self.note(format!("{} call failed: {e}", role.as_str())),
        }
        result
    }

    fn entry_text(&self, i: usize) -> &str {
        match &self.raw_last {
            Some((j, raw)) if *j == i => raw,
            _ => &self.st.transcript[i].text,
        }
    }

    fn exchange_between(&self, from: usize, to: usize) -> String {
        let lines: Vec<(bool, &str)> = (from..to)
            .filter_map(|i| {
                let e = &self.st.transcript[i];
                match e.kind {
                    EntryKind::Question | EntryKind::ClarificationQuestion => Some((true, self.entry_text(i))),
                    EntryKind::Response | EntryKind::ClarificationResponse => Some((false, self.entry_text(i))),
                    _ => None,
                }
            })
            .collect();
        prompts::exchange(&lines)
    }

    fn slice(&self) -> String {
        self.exchange_between(self.st.node_started_at, self.st.transcript.len())
    }

    fn question_text(&self) -> String {
        self.st.transcript[self.st.node_started_at..]
            .iter()
            .find(|e| e.kind == EntryKind::Question)
            .map(|e| e.text.clone())
            .unwrap_or_default()
    }

    fn response_from(&self, from: usize) -> String {
        (from..self.st.transcript.len())
            .filter(|&i| self.st.transcript[i].kind.is_participant())
            .map(|i| self.entry_text(i).trim())
            .filter(|t| !t.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn response(&self) -> String {
        self.response_from(self.st.other_started_at.unwrap_or(self.st.node_started_at))
    }

    fn last_participant_entry(&self) -> usize {
        self.st.transcript.iter().rposition(|e| e.kind.is_participant()).unwrap_or(0)
    }

    fn is_identity_node(&self, id: &str) -> bool {
        self.flow.node(id).is_some_and(|n| n.identity_optin)
    }

    /// Prior-turn memory under the session's strategy.
    fn context(&self) -> String {
        match self.st.config.memory {
            crate::flow::MemoryStrategy::Extracted => {
                let visible: VariableVector = self
                    .st
                    .variables
                    .iter()
                    .filter(|(_, b)| !b.provenance.as_ref().is_some_and(|p| self.is_identity_node(&p.node)))
                    .filter_map(|(k, b)| b.value.clone().map(|v| (k.to_string(), v)))
                    .collect();
                visible.serialize_for_prompt()
            }
            crate::flow::MemoryStrategy::Full => {
                let lines: Vec<(bool, &str)> = (0..self.st.node_started_at)
                    .filter(|&i| !self.is_identity_node(&self.st.transcript[i].node))
                    .filter_map(|i| {
                        let e = &self.st.transcript[i];
                        match e.kind {
                            EntryKind::Question | EntryKind::ClarificationQuestion => Some((true, e.text.as_str())),
                            EntryKind::Response | EntryKind::ClarificationResponse => Some((false, e.text.as_str())),
                            _ => None,
                        }
                    })
                    .collect();
                prompts::exchange(&lines)
            }
        }
    }

    fn kb_ids(&self, kind: KbKind) -> Vec<&'a str> {
        let kb = &self.engine.knowledge;
        self.flow
            .knowledge_bases
            .iter()
            .filter(|r| kb.contains(&r.id) && r.kind.map_or_else(|| kb.kind(&r.id).ok() == Some(kind), |k| k == kind))
            .map(|r| r.id.as_str())
            .collect()
    }

    fn glossary(&self, query: &str) -> Vec<String> {
        let mut hits = Vec::new();
        for id in self.kb_ids(KbKind::Glossary) {
            if let Ok(found) = self.engine.knowledge.retrieve(id, query, 3) {
                hits.extend(found);
            }
        }
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.entry_id.cmp(&b.entry_id)));
        hits.into_iter().take(3).map(|h| h.snippet).collect()
    }

    fn budget_left(&self) -> bool {
        let used = self.st.clarifications_used.get(&self.st.current_node).copied().unwrap_or(0);
        used < self.node().max_clarifications
    }

    fn spend_clarification(&mut self) {
        *self.st.clarifications_used.entry(self.st.current_node.clone()).or_insert(0) += 1;
    }

    fn check_input(&self, input: &Input) -> Result<(), EngineError> {
        let node = self.node();
        let bad = |msg: String| Err(EngineError::InvalidInput(msg));
        match (self.st.phase, input) {
            (Phase::Done, _) => Err(EngineError::SessionNotActive),
            (_, Input::Text(_)) => Ok(()),
            (Phase::AwaitResponse | Phase::AwaitClarification, Input::Choice(id)) => {
                if node.kind == NodeKind::Discrete && node.options.iter().any(|o| &o.id == id) {
                    Ok(())
                } else {
                    bad(format!("`{id}` is not an option of this question"))
                }
            }
            (Phase::AwaitParaphraseAck, Input::Choice(id)) if id == CONTINUE || id == ADD => Ok(()),
            (Phase::AwaitVoluntaryAdd, Input::Choice(id)) if id == CONTINUE => Ok(()),
            (_, Input::Choice(id)) => bad(format!("`{id}` is not accepted here")),
        }
    }

    /// Truncates, screens and stores a typed utterance.
    fn store_text(&mut self, kind: EntryKind, text: &str) -> usize {
        let max = self.st.config.max_input_chars;
        let mut text = text.to_string();
        if text.chars().count() > max {
            text = truncate_chars(&text, max).to_string();
            self.note(format!("input truncated to {max} characters"));
        }
        let text = privacy::truncate_postal(&text);
        let (verdict, notes) =
            self.engine.gateway.screen(&self.st.session_id, &text, &self.st.config, self.st.turn_count);
        for n in notes {
            self.note(n);
        }
        let stored = if self.node().identity_optin {
            text.clone()
        } else {
            match privacy::redact(&text, &verdict) {
                Ok(r) => r.text,
                Err(_) => privacy::scrub(&text, &[]).text,
            }
        };
        let i = self.push(kind, stored);
        self.raw_last = Some((i, text));
        i
    }

    fn handle(&mut self, input: Input) -> Result<EngineAction, EngineError> {
        let node = self.node();
        match self.st.phase {
            Phase::AwaitResponse | Phase::AwaitClarification => {
                let kind = if self.st.phase == Phase::AwaitResponse {
                    EntryKind::Response
                } else {
                    EntryKind::ClarificationResponse
                };
                match (node.kind, input) {
                    (NodeKind::Open, Input::Text(t)) => {
                        self.store_text(kind, &t);
                        self.open_response()
                    }
                    (NodeKind::Discrete, Input::Choice(id)) => {
                        let label = node.options.iter().find(|o| o.id == id).map(|o| o.label.clone());
                        let label = label.map(|l| self.render(&l)).unwrap_or_else(|| id.clone());
                        self.push(kind, label);
                        self.select_option(&id)
                    }
                    (NodeKind::Discrete, Input::Text(t)) => {
                        self.store_text(kind, &t);
                        match self.match_option(&t) {
                            Intent::Option(id) => self.select_option(&id),
                            Intent::OffTopic if self.st.mode != FlowMode::Structured => self.off_topic("matcher"),
                            _ => self.no_match(),
                        }
                    }
                    (NodeKind::Open, Input::Choice(id)) => Err(EngineError::InvalidInput(format!("`{id}` is not accepted here"))),
                }
            }
            Phase::AwaitOtherText => {
                let Input::Text(t) = input else { unreachable!("checked") };
                self.store_text(EntryKind::ClarificationResponse, &t);
                if self.st.mode == FlowMode::Structured {
                    self.extract(false);
                    return self.advance();
                }
                let judgement = self.judge();
                if judgement != Judgement::Sufficient && self.budget_left() {
                    self.spend_clarification();
                    let text = self.clarify();
                    self.push(EntryKind::ClarificationQuestion, text.clone());
                    self.st.phase = Phase::AwaitOtherClarification;
                    return Ok(EngineAction::AskClarification { text });
                }
                self.extract(false);
                self.advance()
            }
            Phase::AwaitOtherClarification => {
                let Input::Text(t) = input else { unreachable!("checked") };
                self.store_text(EntryKind::ClarificationResponse, &t);
                self.extract(false);
                self.advance()
            }
            Phase::AwaitParaphraseAck => match input {
                Input::Choice(id) if id == ADD => {
                    let text = self.render(&self.flow.messages.listening);
                    self.push(EntryKind::ClarificationQuestion, text.clone());
                    self.st.phase = Phase::AwaitVoluntaryAdd;
                    Ok(EngineAction::AskClarification { text })
                }
                Input::Choice(_) => self.advance(),
                Input::Text(t) => self.voluntary(&t),
            },
            Phase::AwaitVoluntaryAdd => match input {
                Input::Text(t) => self.voluntary(&t),
                Input::Choice(_) => self.advance(),
            },
            Phase::Done => Err(EngineError::SessionNotActive),
        }
    }

    fn open_response(&mut self) -> Result<EngineAction, EngineError> {
        if self.st.mode == FlowMode::Structured {
            return self.finish_open(false);
        }
        match self.judge() {
            Judgement::Sufficient => self.finish_open(false),
            Judgement::OffTopic => self.off_topic("judge"),
            Judgement::Insufficient if self.budget_left() => {
                self.spend_clarification();
                let text = self.clarify();
                self.push(EntryKind::ClarificationQuestion, text.clone());
                self.st.phase = Phase::AwaitClarification;
                Ok(EngineAction::AskClarification { text })
            }
            Judgement::Insufficient => self.finish_open(false),
        }
    }

    fn record_verdict(&mut self, xi: u8, rationale: String, source: String, off_topic: bool) {
        let node = self.st.current_node.clone();
        self.st.verdicts.push(StoredVerdict { node, xi, rationale, source, off_topic });
    }

    /// Calls the sufficiency judge on the current node's exchange and stores the verdict.
    fn judge(&mut self) -> Judgement {
        let response = self.response();
        if response.trim().is_empty() {
            self.record_verdict(0, "empty response".into(), "engine".into(), false);
            return Judgement::Insufficient;
        }
        if !self.bound(ModelRole::SufficiencyJudge) {
            self.record_verdict(1, "no judge bound".into(), "default".into(), false);
            return Judgement::Sufficient;
        }
        let prompt = prompts::judge(&self.slice(), &self.context(), &self.glossary(&response));
        let hints = [(hint::QUESTION, self.question_text()), (hint::RESPONSE, response)];
        match self.call(ModelRole::SufficiencyJudge, prompt, &hints) {
            Ok(resp) => match prompts::parse_judgement(&resp.text) {
                Some((j, rationale)) => {
                    let xi = u8::from(j == Judgement::Sufficient);
                    self.record_verdict(xi, rationale, resp.backend_id, j == Judgement::OffTopic);
                    j
                }
                None => {
                    self.note(format!("judge reply not understood, treated as sufficient: {}", resp.text.trim()));
                    self.record_verdict(1, "unparseable reply".into(), resp.backend_id, false);
                    Judgement::Sufficient
                }
            },
            Err(_) => {
                self.record_verdict(1, "judge unavailable".into(), "default".into(), false);
                Judgement::Sufficient
            }
        }
    }

    fn clarify(&mut self) -> String {
        if self.bound(ModelRole::Clarifier) {
            let instruction = self.node().followup_template.as_ref().map(|t| self.render(t));
            let prompt = prompts::clarifier(&self.slice(), &self.context(), instruction.as_deref(), &self.st.language);
            let hints = [(hint::QUESTION, self.question_text()), (hint::RESPONSE, self.response())];
            if let Ok(resp) = self.call(ModelRole::Clarifier, prompt, &hints) {
                let text = resp.text.trim();
                if !text.is_empty() {
                    return text.to_string();
                }
                self.note("clarifier returned nothing");
            }
        }
        self.render(&self.flow.messages.clarify_fallback)
    }

    fn off_topic(&mut self, source: &str) -> Result<EngineAction, EngineError> {
        if self.node().kind == NodeKind::Discrete {
            self.record_verdict(0, "off-topic reply".into(), source.into(), true);
        }
        if self.budget_left() {
            self.spend_clarification();
            let apology = self.render(&self.flow.messages.apology);
            let question = self.question_text();
            self.push(EntryKind::ClarificationQuestion, format!("{apology}\n{question}"));
            self.st.phase = Phase::AwaitClarification;
            return Ok(EngineAction::ApologizeAndRestate { text: apology, question });
        }
        self.note("off-topic reply with no clarifications left; moving on");
        if self.node().kind == NodeKind::Open {
            self.finish_open(true)
        } else {
            self.extract(true);
            self.advance()
        }
    }

    fn match_option(&mut self, utterance: &str) -> Intent {
        let node = self.node();
        let wanted = utterance.trim();
        let mut options = Vec::new();
        for o in &node.options {
            let label = self.render(&o.label);
            if o.id.eq_ignore_ascii_case(wanted) || label.trim().eq_ignore_ascii_case(wanted) {
                return Intent::Option(o.id.clone());
            }
            options.push((o.id.clone(), label));
        }
        if !self.bound(ModelRole::IntentMatcher) {
            return Intent::NoMatch;
        }
        let question = self.question_text();
        let raw = self.raw_last.as_ref().map(|(_, r)| r.clone()).unwrap_or_else(|| utterance.to_string());
        let prompt = prompts::intent(&question, &options, &raw);
        let listing = options.iter().map(|(id, l)| format!("{id}\t{l}")).collect::<Vec<_>>().join("\n");
        let hints = [(hint::QUESTION, question), (hint::OPTIONS, listing), (hint::RESPONSE, raw)];
        match self.call(ModelRole::IntentMatcher, prompt, &hints) {
            Ok(resp) => {
                let ids: Vec<&str> = node.options.iter().map(|o| o.id.as_str()).collect();
                prompts::parse_intent(&resp.text, &ids)
            }
            Err(_) => Intent::NoMatch,
        }
    }

    fn select_option(&mut self, id: &str) -> Result<EngineAction, EngineError> {
        let node = self.node();
        let Some(opt) = node.options.iter().find(|o| o.id == id) else {
            return Err(EngineError::InvalidInput(format!("`{id}` is not an option of this question")));
        };
        if opt.other {
            let text = self.render(&self.flow.messages.other_prompt);
            let i = self.push(EntryKind::ClarificationQuestion, text.clone());
            self.st.other_started_at = Some(i);
            self.st.phase = Phase::AwaitOtherText;
            return Ok(EngineAction::AskClarification { text });
        }
        let entry = self.last_participant_entry();
        for name in &node.extract {
            let Some(spec) = self.flow.variable(name) else { continue };
            let value = match prompts::coerce(id, &spec.kind) {
                Ok(v) => Some(v),
                Err(e) => {
                    self.note(format!("option `{id}` gives no value for {name}: {e:?}"));
                    None
                }
            };
            self.bind(name, value, entry);
        }
        self.advance()
    }

    fn no_match(&mut self) -> Result<EngineAction, EngineError> {
        if self.st.mode != FlowMode::Structured && self.budget_left() {
            self.spend_clarification();
            let text = self.clarify();
            self.push(EntryKind::ClarificationQuestion, text.clone());
            self.st.phase = Phase::AwaitClarification;
            return Ok(EngineAction::AskClarification { text });
        }
        self.note("reply matched no option; moving on");
        self.extract(true);
        self.advance()
    }

    fn bind(&mut self, name: &str, value: Option<Value>, entry: usize) {
        let provenance = Some(Provenance { node: self.st.current_node.clone(), entry });
        let previous = self.st.variables.set(name, Binding { value: value.clone(), provenance });
        if let Some(Binding { value: Some(old), .. }) = previous {
            if Some(&old) != value.as_ref() {
                let new = value.map(|v| v.to_string()).unwrap_or_else(|| "null".into());
                self.note(format!("{name} overwritten: {old} -> {new}"));
            }
        }
    }

    /// Fills the node's extract variables from the exchange.
    fn extract(&mut self, forced_null: bool) {
        let node = self.node();
        let entry = self.last_participant_entry();
        let response = self.response();
        for name in &node.extract {
            let Some(spec) = self.flow.variable(name) else { continue };
            let value = if forced_null {
                None
            } else if self.bound(ModelRole::Extractor) {
                let prompt = prompts::extractor(spec, &self.slice());
                let values = match &spec.kind {
                    VariableKind::Enum(v) => v.join(","),
                    _ => String::new(),
                };
                let hints = [
                    (hint::VARIABLE, spec.name.clone()),
                    (hint::KIND, kind_name(&spec.kind).to_string()),
                    (hint::VALUES, values),
                    (hint::RESPONSE, response.clone()),
                ];
                match self.call(ModelRole::Extractor, prompt, &hints) {
                    Ok(resp) => match prompts::coerce(&resp.text, &spec.kind) {
                        Ok(v) => Some(v),
                        Err(CoerceError::Null) => None,
                        Err(CoerceError::Mismatch(m)) => {
                            self.note(format!("extracted value for {name} discarded: {m}"));
                            None
                        }
                    },
                    Err(_) => None,
                }
            } else if spec.kind == VariableKind::String && !response.is_empty() {
                Some(Value::Str(response.clone()))
            } else {
                None
            };
            self.bind(name, value, entry);
        }
    }

    fn paraphrase(&mut self) -> Option<EngineAction> {
        let node = self.node();
        if self.st.mode == FlowMode::Structured
            || node.kind != NodeKind::Open
            || !node.paraphrase
            || !self.bound(ModelRole::Summarizer)
        {
            return None;
        }
        let response = self.response();
        if response.is_empty() {
            return None;
        }
        let prompt = prompts::summarizer(&self.slice(), &self.context(), &self.glossary(&response), &self.st.language);
        let hints = [(hint::QUESTION, self.question_text()), (hint::RESPONSE, response)];
        let text = self.call(ModelRole::Summarizer, prompt, &hints).ok()?.text.trim().to_string();
        if text.is_empty() {
            return None;
        }
        self.push(EntryKind::AgentParaphrase, text.clone());
        self.st.phase = Phase::AwaitParaphraseAck;
        Some(EngineAction::Paraphrase { text, offer_voluntary_add: true })
    }

    fn finish_open(&mut self, forced_null: bool) -> Result<EngineAction, EngineError> {
        self.extract(forced_null);
        if !forced_null {
            if let Some(action) = self.paraphrase() {
                return Ok(action);
            }
        }
        self.advance()
    }

    fn voluntary(&mut self, text: &str) -> Result<EngineAction, EngineError> {
        self.store_text(EntryKind::ClarificationResponse, text);
        self.extract(false);
        self.advance()
    }

    fn advance(&mut self) -> Result<EngineAction, EngineError> {
        self.st.other_started_at = None;
        if self.flow.mode == FlowMode::Unstructured {
            return Ok(self.advance_unstructured());
        }
        let node = self.node();
        let (target, skipped) = first_match(node, &self.st.variables);
        for (j, reason) in skipped {
            self.note(format!("branch rule {j} of {} skipped: {reason}", node.id));
        }
        self.enter(target)
    }

    fn enter(&mut self, id: &str) -> Result<EngineAction, EngineError> {
        if id == END {
            return Ok(self.complete());
        }
        let node = self.flow.node(id).ok_or_else(|| EngineError::UnknownNode(id.to_string()))?;
        let visit = self.st.visited_nodes().iter().filter(|v| **v == id).count();
        self.st.current_node = id.to_string();
        self.st.node_started_at = self.st.transcript.len();
        self.st.phase = Phase::AwaitResponse;
        self.st.clarifications_used.insert(id.to_string(), 0);
        let mut preface = Vec::new();
        for p in &node.preface {
            let text = self.render(p);
            self.push(EntryKind::AgentNotice, text.clone());
            preface.push(text);
        }
        let seed = self.st.config.seed.unwrap_or(0);
        let text = match realize_question(node, &self.st.variables, &self.st.language, seed, visit) {
            Ok(t) => t,
            Err(e) => {
                self.note(format!("question rendered leniently: {e}"));
                let template = match &node.question {
                    QuestionText::Template(t) => t,
                    QuestionText::VariationPool(pool) => &pool[variation_index(seed, id, visit, pool.len())],
                };
                self.render(template)
            }
        };
        let text = if self.st.mode != FlowMode::Structured && self.bound(ModelRole::QuestionGen) {
            self.rephrase(&text)
        } else {
            text
        };
        self.push(EntryKind::Question, text.clone());
        let options = node
            .options
            .iter()
            .map(|o| OptionView { id: o.id.clone(), label: self.render(&o.label) })
            .collect();
        Ok(EngineAction::AskQuestion { text, preface, options, assets: node.assets.clone() })
    }

    fn rephrase(&mut self, question: &str) -> String {
        let prompt = prompts::rephrase(question, &self.context(), &self.st.language);
        match self.call(ModelRole::QuestionGen, prompt, &[(hint::QUESTION, question.to_string())]) {
            Ok(resp) if !resp.text.trim().is_empty() => resp.text.trim().to_string(),
            _ => question.to_string(),
        }
    }

    fn complete(&mut self) -> EngineAction {
        self.st.current_node = END.to_string();
        self.st.node_started_at = self.st.transcript.len();
        let summary = self.render(&self.flow.messages.closing);
        self.push(EntryKind::AgentNotice, summary.clone());
        self.st.status = SessionStatus::Completed;
        self.st.phase = Phase::Done;
        EngineAction::Complete { summary }
    }

    fn advance_unstructured(&mut self) -> EngineAction {
        if self.st.questions_asked >= self.st.config.max_questions {
            return self.complete();
        }
        if self.bound(ModelRole::GoalJudge) {
            let prompt = prompts::goal(&self.flow.goal, &self.context_including_current());
            if let Ok(resp) = self.call(ModelRole::GoalJudge, prompt, &[(hint::GOAL, self.flow.goal.clone())]) {
                if resp.text.trim().starts_with('1') {
                    self.note("goal reached");
                    return self.complete();
                }
            }
        }
        self.next_unstructured()
    }

    fn context_including_current(&mut self) -> String {
        let saved = self.st.node_started_at;
        self.st.node_started_at = self.st.transcript.len();
        let c = self.context();
        self.st.node_started_at = saved;
        c
    }

    fn next_unstructured(&mut self) -> EngineAction {
        if self.st.questions_asked >= self.st.config.max_questions {
            return self.complete();
        }
        let Some(text) = self.compose_question() else {
            self.note("no further question available");
            return self.complete();
        };
        self.st.questions_asked += 1;
        let id = format!("u{}", self.st.questions_asked);
        self.st.current_node = id.clone();
        self.st.node_started_at = self.st.transcript.len();
        self.st.phase = Phase::AwaitResponse;
        self.st.clarifications_used.insert(id, 0);
        let template = &self.flow.nodes[0];
        let mut preface = Vec::new();
        if self.st.questions_asked == 1 {
            for p in &template.preface {
                let t = self.render(p);
                self.push(EntryKind::AgentNotice, t.clone());
                preface.push(t);
            }
        }
        self.push(EntryKind::Question, text.clone());
        EngineAction::AskQuestion { text, preface, options: Vec::new(), assets: template.assets.clone() }
    }

    fn compose_question(&mut self) -> Option<String> {
        use crate::flow::QuestionSource;
        let context = self.context_including_current();
        let retrieve = match self.st.config.question_source {
            QuestionSource::Generate => self.st.questions_asked == 0 || !self.bound(ModelRole::QuestionGen),
            QuestionSource::RetrieveExact | QuestionSource::RetrieveVaried => true,
        };
        if retrieve {
            if let Some(q) = self.retrieve_question(&context) {
                return Some(if self.st.config.question_source == QuestionSource::RetrieveVaried
                    && self.bound(ModelRole::QuestionGen)
                {
                    self.rephrase(&q)
                } else {
                    q
                });
            }
        }
        if self.bound(ModelRole::QuestionGen) {
            let instruction = match &self.flow.nodes[0].question {
                QuestionText::Template(t) => self.render(t),
                QuestionText::VariationPool(pool) => self.render(&pool[0]),
            };
            let prompt = prompts::generate(&self.flow.goal, &instruction, &context, &self.st.language);
            if let Ok(resp) = self.call(ModelRole::QuestionGen, prompt, &[(hint::GOAL, self.flow.goal.clone())]) {
                let q = resp.text.trim();
                if !q.is_empty() {
                    return Some(q.to_string());
                }
            }
        }
        if self.st.questions_asked == 0 {
            let seed = self.st.config.seed.unwrap_or(0);
            let node = &self.flow.nodes[0];
            return realize_question(node, &self.st.variables, &self.st.language, seed, 0).ok();
        }
        None
    }

    fn retrieve_question(&mut self, context: &str) -> Option<String> {
        let exclude: BTreeSet<String> = self.st.asked_entries.iter().cloned().collect();
        for id in self.kb_ids(KbKind::QuestionBank) {
            match self.engine.knowledge.pick_candidate_question(id, &self.flow.goal, context, &exclude) {
                Ok(Some(entry)) => {
                    self.st.asked_entries.push(entry.id);
                    return Some(entry.text);
                }
                Ok(None) => {}
                Err(e) => self.note(format!("question bank {id}: {e}")),
            }
        }
        None
    }
}
