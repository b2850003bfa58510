#![allow(dead_code)]

pub mod criteria;
pub mod gen;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use interlocutor::engine::{Engine, Input, LogicalClock, Phase, SessionState, ADD, CONTINUE};
use interlocutor::flow::{parse_flow, FlowDefinition};
use interlocutor::gateway::{Fixture, Gateway, Locality, ScriptedBackend};

pub fn flows_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("flows")
}

pub fn read(name: &str) -> String {
    let path = flows_dir().join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn flow(name: &str) -> FlowDefinition {
    parse_flow(&read(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn fixture(name: &str) -> Fixture {
    Fixture::parse(&read(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// A logical-clock engine whose backend `id` answers from a fixture JSON array.
pub fn scripted_engine(entries: &str, id: &str, locality: Locality) -> Engine {
    let fx = Fixture::parse(entries).unwrap();
    let gw = Gateway::new().with_request_log();
    gw.register(Arc::new(ScriptedBackend::new(id, locality, fx.backend, false)));
    Engine::new(Arc::new(gw)).with_clock(Arc::new(LogicalClock))
}

/// Feeds inputs chosen by `next` until the session ends or `cap` turns pass; returns turns used.
pub fn drive(
    engine: &Engine,
    flow: &FlowDefinition,
    st: &mut SessionState,
    cap: usize,
    mut next: impl FnMut(&SessionState) -> Input,
) -> usize {
    let mut turns = 0;
    while st.is_active() && turns < cap {
        let input = match st.phase {
            Phase::AwaitParaphraseAck | Phase::AwaitVoluntaryAdd => Input::Choice(CONTINUE.into()),
            _ => next(st),
        };
        engine.ingest(flow, st, input).unwrap();
        turns += 1;
    }
    turns
}

pub fn is_button(input: &Input) -> bool {
    matches!(input, Input::Choice(c) if c == CONTINUE || c == ADD)
}
