//! Headless sessions driven by a fixture file of backend replies and participant turns.

use std::sync::Arc;

use crate::engine::{Engine, EngineAction, EngineError, EntryKind, Input, LogicalClock, SessionState};
use crate::flow::{ConfigOverrides, FlowDefinition, MemoryStrategy, SystemConfig};
use crate::gateway::{DispatchRecord, Fixture, Gateway, Locality, ScriptedBackend, TokenLedger};
use crate::knowledge::KnowledgeStore;

/// Backend id used when a flow binds no roles at all.
pub const SCRIPTED_ID: &str = "scripted";

#[derive(Debug, Clone)]
pub struct ReplayOptions {
    pub overrides: ConfigOverrides,
    pub language: Option<String>,
    /// Fail on the first request no fixture entry answers.
    pub strict: bool,
    pub session_id: String,
    pub knowledge: Option<Arc<KnowledgeStore>>,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            overrides: ConfigOverrides::default(),
            language: None,
            strict: true,
            session_id: "replay".into(),
            knowledge: None,
        }
    }
}

impl ReplayOptions {
    pub fn seed(mut self, seed: u64) -> Self {
        self.overrides.seed = Some(seed);
        self
    }

    pub fn memory(mut self, memory: MemoryStrategy) -> Self {
        self.overrides.memory = Some(memory);
        self
    }
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub state: SessionState,
    pub ledger: TokenLedger,
    pub actions: Vec<EngineAction>,
    pub dispatches: Vec<DispatchRecord>,
    /// Requests no fixture entry answered.
    pub misses: Vec<String>,
    /// Participant turns left over after the session ended.
    pub unused_turns: usize,
}

impl ReplayOutcome {
    pub fn completed(&self) -> bool {
        self.state.status == crate::engine::SessionStatus::Completed
    }
}

/// A logical-clock engine whose every bound backend id answers from `fixture`.
pub fn scripted_engine(fixture: &Fixture, config: &SystemConfig, strict: bool) -> (Engine, ScriptedBackend) {
    let base = ScriptedBackend::new(SCRIPTED_ID, Locality::Local, fixture.backend.clone(), strict);
    let gateway = Gateway::new().with_request_log();
    let mut ids: Vec<&String> = config.model_bindings.values().collect();
    ids.sort();
    ids.dedup();
    if ids.is_empty() {
        gateway.register(Arc::new(base.clone()));
    }
    for id in ids {
        gateway.register(Arc::new(base.renamed(id.as_str())));
    }
    (Engine::new(Arc::new(gateway)).with_clock(Arc::new(LogicalClock)), base)
}

/// Feeds `turns` to an active session until they run out or the session ends.
pub fn feed(
    engine: &Engine,
    flow: &FlowDefinition,
    state: &mut SessionState,
    turns: &[Input],
) -> Result<(Vec<EngineAction>, usize), EngineError> {
    let mut actions = Vec::new();
    for (i, turn) in turns.iter().enumerate() {
        if !state.is_active() {
            return Ok((actions, turns.len() - i));
        }
        actions.push(engine.ingest(flow, state, turn.clone())?);
    }
    Ok((actions, 0))
}

/// Runs a whole session from the fixture's participant turns.
pub fn replay(flow: &FlowDefinition, fixture: &Fixture, opts: &ReplayOptions) -> Result<ReplayOutcome, EngineError> {
    let config = opts.overrides.apply(&flow.config);
    let (engine, backend) = scripted_engine(fixture, &config, opts.strict);
    let engine = match &opts.knowledge {
        Some(k) => engine.with_knowledge(k.clone()),
        None => engine,
    };
    let (mut state, first) =
        engine.start_session_with_id(flow, &opts.overrides, opts.language.as_deref(), opts.session_id.clone())?;
    let mut actions = vec![first];
    let (more, unused_turns) = feed(&engine, flow, &mut state, &fixture.participant)?;
    actions.extend(more);
    let ledger = engine.gateway().report_tokens(&state.session_id).unwrap_or_default();
    Ok(ReplayOutcome {
        state,
        ledger,
        actions,
        dispatches: engine.gateway().dispatch_log(),
        misses: backend.misses(),
        unused_turns,
    })
}

/// Participant-visible transcript, one `AGENT:` or `PARTICIPANT:` block per entry.
pub fn render_transcript(state: &SessionState) -> String {
    let mut out = String::new();
    for e in state.transcript.iter().filter(|e| e.kind.is_participant_visible()) {
        let who = if e.kind.is_participant() { "PARTICIPANT" } else { "AGENT" };
        out.push_str(who);
        out.push_str(": ");
        out.push_str(&e.text);
        out.push('\n');
    }
    out
}

/// Transcript entries of one kind, in order.
pub fn texts_of(state: &SessionState, kind: EntryKind) -> Vec<&str> {
    state.transcript.iter().filter(|e| e.kind == kind).map(|e| e.text.as_str()).collect()
}
