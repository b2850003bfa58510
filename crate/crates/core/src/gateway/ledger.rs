use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::flow::ModelRole;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSample {
    pub turn: u32,
    pub role: ModelRole,
    pub backend: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Totals {
    fn add(&mut self, s: &TokenSample) {
        self.calls += 1;
        self.prompt_tokens += s.prompt_tokens;
        self.completion_tokens += s.completion_tokens;
    }
}

/// Per-session token accounting: one sample per model call plus running totals.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub samples: Vec<TokenSample>,
    pub by_role: BTreeMap<ModelRole, Totals>,
    pub total: Totals,
}

impl TokenLedger {
    pub fn record(&mut self, sample: TokenSample) {
        self.by_role.entry(sample.role).or_default().add(&sample);
        self.total.add(&sample);
        self.samples.push(sample);
    }

    pub fn role(&self, role: ModelRole) -> Totals {
        self.by_role.get(&role).copied().unwrap_or_default()
    }

    pub fn calls(&self, role: ModelRole) -> u64 {
        self.role(role).calls
    }

    /// Prompt and completion tokens summed per turn index.
    pub fn per_turn(&self) -> BTreeMap<u32, Totals> {
        let mut out: BTreeMap<u32, Totals> = BTreeMap::new();
        for s in &self.samples {
            out.entry(s.turn).or_default().add(s);
        }
        out
    }

    /// True when the running totals equal the sums over samples.
    pub fn is_consistent(&self) -> bool {
        let mut rebuilt = TokenLedger::default();
        for s in &self.samples {
            rebuilt.record(s.clone());
        }
        rebuilt.by_role == self.by_role && rebuilt.total == self.total
    }
}
