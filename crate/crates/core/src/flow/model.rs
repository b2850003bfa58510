use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::predicate::{Predicate, VarType};
use super::template::PromptTemplate;

/// Branch target meaning "session complete".
pub const END: &str = "END";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMode {
    Structured,
    SemiStructured,
    Unstructured,
}

impl FlowMode {
    /// Clarification budget a node gets when the document leaves it unset.
    pub fn default_clarifications(self) -> u32 {
        match self {
            FlowMode::Structured => 0,
            FlowMode::SemiStructured | FlowMode::Unstructured => 1,
        }
    }
}

/// Model roles a flow can bind to backends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    QuestionGen,
    SufficiencyJudge,
    Clarifier,
    Extractor,
    Summarizer,
    IntentMatcher,
    PiiScreener,
    GoalJudge,
}

impl ModelRole {
    pub const ALL: [ModelRole; 8] = [
        ModelRole::QuestionGen,
        ModelRole::SufficiencyJudge,
        ModelRole::Clarifier,
        ModelRole::Extractor,
        ModelRole::Summarizer,
        ModelRole::IntentMatcher,
        ModelRole::PiiScreener,
        ModelRole::GoalJudge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelRole::QuestionGen => "question_gen",
            ModelRole::SufficiencyJudge => "sufficiency_judge",
            ModelRole::Clarifier => "clarifier",
            ModelRole::Extractor => "extractor",
            ModelRole::Summarizer => "summarizer",
            ModelRole::IntentMatcher => "intent_matcher",
            ModelRole::PiiScreener => "pii_screener",
            ModelRole::GoalJudge => "goal_judge",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

/// How prior rounds are carried into later prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryStrategy {
    /// Prompts embed the whole transcript.
    Full,
    /// Prompts embed only the serialized variable vector.
    #[default]
    Extracted,
}

/// What happens to screener-flagged content bound for a cloud backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyPolicy {
    #[default]
    LocalOnly,
    RedactThenCloud,
}

/// Where unstructured-mode questions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionSource {
    #[default]
    Generate,
    RetrieveExact,
    RetrieveVaried,
}

fn default_max_questions() -> u32 {
    20
}

/// Model settings for a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub temperature: f64,
    pub max_input_chars: usize,
    pub max_output_chars: usize,
    pub model_bindings: BTreeMap<ModelRole, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub memory: MemoryStrategy,
    pub privacy_policy: PrivacyPolicy,
    pub max_questions: u32,
    pub question_source: QuestionSource,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_input_chars: 4000,
            max_output_chars: 4000,
            model_bindings: BTreeMap::new(),
            seed: None,
            memory: MemoryStrategy::default(),
            privacy_policy: PrivacyPolicy::default(),
            max_questions: default_max_questions(),
            question_source: QuestionSource::default(),
        }
    }
}

/// Partial [`SystemConfig`] used for session overrides and mid-session adjustment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_input_chars: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_chars: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_bindings: Option<BTreeMap<ModelRole, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<MemoryStrategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub privacy_policy: Option<PrivacyPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_questions: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_source: Option<QuestionSource>,
}

impl ConfigOverrides {
    pub fn apply(&self, base: &SystemConfig) -> SystemConfig {
        let mut c = base.clone();
        if let Some(v) = self.temperature {
            c.temperature = v;
        }
        if let Some(v) = self.max_input_chars {
            c.max_input_chars = v;
        }
        if let Some(v) = self.max_output_chars {
            c.max_output_chars = v;
        }
        if let Some(v) = &self.model_bindings {
            c.model_bindings = v.clone();
        }
        if let Some(v) = self.seed {
            c.seed = Some(v);
        }
        if let Some(v) = self.memory {
            c.memory = v;
        }
        if let Some(v) = self.privacy_policy {
            c.privacy_policy = v;
        }
        if let Some(v) = self.max_questions {
            c.max_questions = v;
        }
        if let Some(v) = self.question_source {
            c.question_source = v;
        }
        c
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VariableKind {
    String,
    Number,
    Boolean,
    Enum(Vec<String>),
}

impl VariableKind {
    pub fn var_type(&self) -> VarType {
        match self {
            VariableKind::String => VarType::Str,
            VariableKind::Number => VarType::Number,
            VariableKind::Boolean => VarType::Bool,
            VariableKind::Enum(v) => VarType::Enum(v.clone()),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            VariableKind::String => "string".into(),
            VariableKind::Number => "number".into(),
            VariableKind::Boolean => "boolean".into(),
            VariableKind::Enum(values) => format!("one of: {}", values.join(", ")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    pub description: String,
    pub required: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Discrete,
    Open,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptionSpec {
    pub id: String,
    pub label: PromptTemplate,
    /// Free-text "Other" choice.
    pub other: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuestionText {
    Template(PromptTemplate),
    /// Pre-written variations; one is drawn per visit by seeded RNG.
    VariationPool(Vec<PromptTemplate>),
}

impl QuestionText {
    pub fn templates(&self) -> Vec<&PromptTemplate> {
        match self {
            QuestionText::Template(t) => vec![t],
            QuestionText::VariationPool(pool) => pool.iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchRule {
    pub source: String,
    pub when: Predicate,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionNode {
    pub id: String,
    pub kind: NodeKind,
    pub question: QuestionText,
    pub options: Vec<OptionSpec>,
    pub max_clarifications: u32,
    pub extract: Vec<String>,
    pub branch_rules: Vec<BranchRule>,
    pub default_target: String,
    pub assets: Vec<String>,
    pub followup_template: Option<PromptTemplate>,
    /// Agent messages shown before the question (introductions, progress notes).
    pub preface: Vec<PromptTemplate>,
    /// Whether a completed open answer is paraphrased back to the participant.
    pub paraphrase: bool,
    /// Identity fields collected only with participant opt-in; never leave local backends.
    pub identity_optin: bool,
}

impl QuestionNode {
    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.branch_rules.iter().map(|r| r.target.as_str()).chain(std::iter::once(self.default_target.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KbKind {
    Document,
    Glossary,
    QuestionBank,
}

/// A knowledge base the flow uses, with an optional ingest file.
#[derive(Debug, Clone, PartialEq)]
pub struct KbRef {
    pub id: String,
    pub kind: Option<KbKind>,
    pub source: Option<String>,
}

/// Fixed agent phrases, per language.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMessages {
    pub apology: PromptTemplate,
    pub listening: PromptTemplate,
    pub other_prompt: PromptTemplate,
    pub clarify_fallback: PromptTemplate,
    pub closing: PromptTemplate,
}

pub(crate) const DEFAULT_APOLOGY: &str = "I'm sorry, but I'm not able to help with that here. Let me repeat the question.";
pub(crate) const DEFAULT_LISTENING: &str = "Great. I am listening :)";
pub(crate) const DEFAULT_OTHER_PROMPT: &str = "Could you please type in the specifics?";
pub(crate) const DEFAULT_CLARIFY: &str = "Could you clarify?";
pub(crate) const DEFAULT_CLOSING: &str = "Thank you for answering these questions!";

/// A parsed interview program.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDefinition {
    pub id: String,
    pub version: String,
    pub mode: FlowMode,
    pub system_prompt: String,
    pub config: SystemConfig,
    pub variables: Vec<VariableSpec>,
    pub nodes: Vec<QuestionNode>,
    pub goal: String,
    /// Declared language tags; the first is the default.
    pub languages: Vec<String>,
    pub knowledge_bases: Vec<KbRef>,
    pub messages: FlowMessages,
}

impl FlowDefinition {
    pub fn node(&self, id: &str) -> Option<&QuestionNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn variable(&self, name: &str) -> Option<&VariableSpec> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn default_language(&self) -> &str {
        self.languages.first().map(String::as_str).unwrap_or("en")
    }

    pub fn has_language(&self, lang: &str) -> bool {
        self.languages.iter().any(|l| l == lang)
    }

    pub fn var_type(&self, name: &str) -> Option<VarType> {
        self.variable(name).map(|v| v.kind.var_type())
    }
}
