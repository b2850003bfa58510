use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::engine::EngineError;
use crate::flow::{FlowDefinition, MemoryStrategy, END};
use crate::gateway::Fixture;
use crate::replay::{replay, ReplayOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryRow {
    pub turn: u32,
    pub full: u64,
    pub extracted: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryComparison {
    pub rows: Vec<MemoryRow>,
    pub total_full: u64,
    pub total_extracted: u64,
}

/// The first `n` nodes, with edges leaving the prefix redirected to the end.
fn prefix(flow: &FlowDefinition, n: usize) -> FlowDefinition {
    let mut f = flow.clone();
    f.nodes.truncate(n.max(1));
    let kept: BTreeSet<String> = f.nodes.iter().map(|n| n.id.clone()).collect();
    for node in &mut f.nodes {
        node.branch_rules.retain(|r| r.target == END || kept.contains(&r.target));
        if node.default_target != END && !kept.contains(&node.default_target) {
            node.default_target = END.to_string();
        }
    }
    f
}

fn prompt_tokens_per_turn(
    flow: &FlowDefinition,
    fixture: &Fixture,
    memory: MemoryStrategy,
    seed: u64,
) -> Result<BTreeMap<u32, u64>, EngineError> {
    let opts = ReplayOptions::default().seed(seed).memory(memory);
    let out = replay(flow, fixture, &ReplayOptions { strict: false, ..opts })?;
    Ok(out.ledger.per_turn().into_iter().map(|(t, totals)| (t, totals.prompt_tokens)).collect())
}

/// Replays the same script under full-history and extracted-variable memory and reports
/// prompt tokens per participant turn.
pub fn compare_memory_strategies(
    flow: &FlowDefinition,
    fixture: &Fixture,
    n_questions: Option<usize>,
    seed: u64,
) -> Result<MemoryComparison, EngineError> {
    let flow = match n_questions {
        Some(n) if n < flow.nodes.len() => prefix(flow, n),
        _ => flow.clone(),
    };
    let full = prompt_tokens_per_turn(&flow, fixture, MemoryStrategy::Full, seed)?;
    let extracted = prompt_tokens_per_turn(&flow, fixture, MemoryStrategy::Extracted, seed)?;
    let turns: BTreeSet<u32> = full.keys().chain(extracted.keys()).copied().collect();
    let rows: Vec<MemoryRow> = turns
        .into_iter()
        .map(|turn| MemoryRow {
            turn,
            full: full.get(&turn).copied().unwrap_or(0),
            extracted: extracted.get(&turn).copied().unwrap_or(0),
        })
        .collect();
    Ok(MemoryComparison {
        total_full: rows.iter().map(|r| r.full).sum(),
        total_extracted: rows.iter().map(|r| r.extracted).sum(),
        rows,
    })
}
