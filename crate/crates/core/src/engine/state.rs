use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::flow::{FlowMode, SystemConfig, VariableVector};

/// Option id a participant sends to move past a paraphrase.
pub const CONTINUE: &str = "continue";
/// Option id a participant sends to add to an answer after its paraphrase.
pub const ADD: &str = "add";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Question,
    Response,
    ClarificationQuestion,
    ClarificationResponse,
    AgentParaphrase,
    /// Agent text outside the question itself: introductions, progress notes, closing.
    AgentNotice,
    SystemNote,
}

impl EntryKind {
    pub fn is_participant_visible(self) -> bool {
        self != EntryKind::SystemNote
    }

    pub fn is_agent(self) -> bool {
        matches!(
            self,
            EntryKind::Question | EntryKind::ClarificationQuestion | EntryKind::AgentParaphrase | EntryKind::AgentNotice
        )
    }

    pub fn is_participant(self) -> bool {
        matches!(self, EntryKind::Response | EntryKind::ClarificationResponse)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub kind: EntryKind,
    pub node: String,
    pub text: String,
    pub timestamp: u64,
    pub token_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Completed,
    Abandoned,
}

/// Where the current node is waiting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AwaitResponse,
    AwaitClarification,
    AwaitOtherText,
    AwaitOtherClarification,
    AwaitParaphraseAck,
    AwaitVoluntaryAdd,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredVerdict {
    pub node: String,
    /// Always 0 or 1.
    pub xi: u8,
    pub rationale: String,
    pub source: String,
    #[serde(default)]
    pub off_topic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionView {
    pub id: String,
    pub label: String,
}

/// What the agent says next. Exactly one per engine step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum EngineAction {
    AskQuestion {
        text: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        preface: Vec<String>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        options: Vec<OptionView>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        assets: Vec<String>,
    },
    AskClarification {
        text: String,
    },
    Paraphrase {
        text: String,
        offer_voluntary_add: bool,
    },
    ApologizeAndRestate {
        text: String,
        question: String,
    },
    Complete {
        summary: String,
    },
}

impl EngineAction {
    pub fn text(&self) -> &str {
        match self {
            EngineAction::AskQuestion { text, .. }
            | EngineAction::AskClarification { text }
            | EngineAction::Paraphrase { text, .. }
            | EngineAction::ApologizeAndRestate { text, .. } => text,
            EngineAction::Complete { summary } => summary,
        }
    }
}

/// A participant turn: typed text or a button press.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Input {
    Text(String),
    Choice(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub flow_id: String,
    pub flow_version: String,
    pub mode: FlowMode,
    pub current_node: String,
    pub transcript: Vec<TranscriptEntry>,
    pub variables: VariableVector,
    pub clarifications_used: BTreeMap<String, u32>,
    pub language: String,
    pub config: SystemConfig,
    pub system_prompt: String,
    pub status: SessionStatus,
    /// Participant inputs accepted so far.
    pub turn_count: u32,
    pub phase: Phase,
    /// Transcript index where the current node's entries begin.
    pub node_started_at: usize,
    /// Transcript index of the prompt for free text after an "Other" choice.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub other_started_at: Option<usize>,
    pub verdicts: Vec<StoredVerdict>,
    /// Unstructured mode: questions asked so far and knowledge-base entries already used.
    #[serde(default)]
    pub questions_asked: u32,
    #[serde(default)]
    pub asked_entries: Vec<String>,
    pub pending_action: Option<EngineAction>,
}

impl SessionState {
    pub fn is_active(&self) -> bool {
        self.status == SessionStatus::Active
    }

    /// Entries of the current node visit.
    pub fn node_entries(&self) -> &[TranscriptEntry] {
        &self.transcript[self.node_started_at.min(self.transcript.len())..]
    }

    /// Question and clarification turns the agent has issued.
    pub fn agent_question_turns(&self) -> usize {
        self.transcript
            .iter()
            .filter(|e| matches!(e.kind, EntryKind::Question | EntryKind::ClarificationQuestion))
            .count()
    }

    /// Nodes visited in order, taken from question entries.
    pub fn visited_nodes(&self) -> Vec<&str> {
        self.transcript.iter().filter(|e| e.kind == EntryKind::Question).map(|e| e.node.as_str()).collect()
    }

    /// Most recent verdict per node.
    pub fn last_verdicts(&self) -> BTreeMap<&str, &StoredVerdict> {
        self.verdicts.iter().map(|v| (v.node.as_str(), v)).collect()
    }
}
