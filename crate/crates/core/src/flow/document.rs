//! JSON flow documents: parsing into [`FlowDefinition`] and serializing back.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::*;
use super::predicate::parse_predicate;
use super::template::PromptTemplate;

/// A positioned problem found while parsing a flow document.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FlowError {
    #[error("syntax error at line {line}, column {column}: {reason}")]
    Syntax { line: usize, column: usize, reason: String },
    #[error("schema error at {path}: {reason}")]
    Schema { path: String, reason: String },
}

/// All errors from one [`parse_flow`] call.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct FlowParseError(pub Vec<FlowError>);

impl fmt::Display for FlowParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum TemplateDoc {
    Text(String),
    PerLanguage(BTreeMap<String, String>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VariableDoc {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    values: Option<Vec<String>>,
    #[serde(default)]
    description: String,
    #[serde(default)]
    required: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptionDoc {
    id: String,
    label: TemplateDoc,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    other: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchRuleDoc {
    when: String,
    target: String,
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: String,
    kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    template: Option<TemplateDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    variation_pool: Option<Vec<TemplateDoc>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    options: Vec<OptionDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_clarifications: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    extract: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    branch_rules: Vec<BranchRuleDoc>,
    default_target: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    assets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    followup_template: Option<TemplateDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    preface: Vec<TemplateDoc>,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    paraphrase: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    identity_optin: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum KbDoc {
    Id(String),
    Full {
        id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        kind: Option<KbKind>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source: Option<String>,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MessagesDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    apology: Option<TemplateDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    listening: Option<TemplateDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    other_prompt: Option<TemplateDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clarify_fallback: Option<TemplateDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    closing: Option<TemplateDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowDoc {
    id: String,
    version: String,
    mode: FlowMode,
    #[serde(default)]
    system_prompt: String,
    #[serde(default)]
    config: SystemConfig,
    #[serde(default)]
    variables: Vec<VariableDoc>,
    nodes: Vec<NodeDoc>,
    #[serde(default)]
    goal: String,
    languages: Vec<String>,
    #[serde(default)]
    knowledge_bases: Vec<KbDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    messages: Option<MessagesDoc>,
}

struct Builder {
    languages: Vec<String>,
    errors: Vec<FlowError>,
}

impl Builder {
    fn schema(&mut self, path: impl Into<String>, reason: impl Into<String>) {
        self.errors.push(FlowError::Schema { path: path.into(), reason: reason.into() });
    }

    fn template(&mut self, path: &str, doc: &TemplateDoc) -> Option<PromptTemplate> {
        let built = match doc {
            TemplateDoc::Text(t) => PromptTemplate::uniform(t, &self.languages),
            TemplateDoc::PerLanguage(map) => PromptTemplate::new(map.iter().map(|(k, v)| (k.clone(), v.clone()))),
        };
        match built {
            Ok(t) => Some(t),
            Err(e) => {
                self.schema(path, e.to_string());
                None
            }
        }
    }

    fn message(&mut self, path: &str, doc: Option<&TemplateDoc>, fallback: &str) -> PromptTemplate {
        doc.and_then(|d| self.template(path, d))
            .unwrap_or_else(|| PromptTemplate::uniform(fallback, &self.languages).expect("default phrases are plain text"))
    }
}

fn classify_json_error(e: &serde_json::Error, path: String) -> FlowError {
    use serde_json::error::Category;
    match e.classify() {
        Category::Syntax | Category::Eof | Category::Io => {
            FlowError::Syntax { line: e.line(), column: e.column(), reason: e.to_string() }
        }
        Category::Data => FlowError::Schema {
            path: if path.is_empty() || path == "." { "$".into() } else { path },
            reason: strip_position(&e.to_string()),
        },
    }
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

/// Parses a UTF-8 JSON flow document.
pub fn parse_flow(text: &str) -> Result<FlowDefinition, FlowParseError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: FlowDoc = match serde_path_to_error::deserialize(de) {
        Ok(doc) => doc,
        Err(e) => {
            let path = e.path().to_string();
            return Err(FlowParseError(vec![classify_json_error(e.inner(), path)]));
        }
    };
    build(doc)
}

fn build(doc: FlowDoc) -> Result<FlowDefinition, FlowParseError> {
    let mut b = Builder { languages: doc.languages.clone(), errors: Vec::new() };
    if doc.languages.is_empty() {
        b.schema("languages", "at least one language tag is required");
    }

    let mut variables = Vec::new();
    for (i, v) in doc.variables.iter().enumerate() {
        let path = format!("variables[{i}]");
        let kind = match (v.kind.as_str(), &v.values) {
            ("string", None) => VariableKind::String,
            ("number", None) => VariableKind::Number,
            ("boolean", None) => VariableKind::Boolean,
            ("enum", Some(values)) => VariableKind::Enum(values.clone()),
            ("enum", None) => {
                b.schema(format!("{path}.values"), "enum variables list their values");
                continue;
            }
            ("string" | "number" | "boolean", Some(_)) => {
                b.schema(format!("{path}.values"), "only enum variables take values");
                continue;
            }
            (other, _) => {
                b.schema(format!("{path}.kind"), format!("unknown variable kind `{other}`"));
                continue;
            }
        };
        variables.push(VariableSpec {
            name: v.name.clone(),
            kind,
            description: v.description.clone(),
            required: v.required,
        });
    }

    let node_ids: BTreeSet<&str> = doc.nodes.iter().map(|n| n.id.as_str()).collect();
    let target_ok = |t: &str| t == END || node_ids.contains(t);

    let mut nodes = Vec::new();
    for (i, n) in doc.nodes.iter().enumerate() {
        let path = format!("nodes[{i}]");
        let question = match (&n.template, &n.variation_pool) {
            (Some(t), None) => b.template(&format!("{path}.template"), t).map(QuestionText::Template),
            (None, Some(pool)) => {
                let built: Vec<_> = pool
                    .iter()
                    .enumerate()
                    .filter_map(|(j, t)| b.template(&format!("{path}.variation_pool[{j}]"), t))
                    .collect();
                if pool.is_empty() {
                    b.schema(format!("{path}.variation_pool"), "variation pool must be nonempty");
                    None
                } else if built.len() == pool.len() {
                    Some(QuestionText::VariationPool(built))
                } else {
                    None
                }
            }
            _ => {
                b.schema(path.clone(), "exactly one of `template` or `variation_pool` is required");
                None
            }
        };
        let options: Vec<OptionSpec> = n
            .options
            .iter()
            .enumerate()
            .filter_map(|(j, o)| {
                let label = b.template(&format!("{path}.options[{j}].label"), &o.label)?;
                Some(OptionSpec { id: o.id.clone(), label, other: o.other })
            })
            .collect();
        let mut branch_rules = Vec::new();
        for (j, r) in n.branch_rules.iter().enumerate() {
            let rpath = format!("{path}.branch_rules[{j}]");
            if !target_ok(&r.target) {
                b.schema(rpath.clone(), format!("branch target `{}` names no node", r.target));
            }
            match parse_predicate(&r.when) {
                Ok(when) => branch_rules.push(BranchRule { source: r.when.clone(), when, target: r.target.clone() }),
                Err(e) => b.schema(format!("{rpath}.when"), e.to_string()),
            }
        }
        if !target_ok(&n.default_target) {
            b.schema(format!("{path}.default_target"), format!("target `{}` names no node", n.default_target));
        }
        let followup_template =
            n.followup_template.as_ref().and_then(|t| b.template(&format!("{path}.followup_template"), t));
        let preface: Vec<_> = n
            .preface
            .iter()
            .enumerate()
            .filter_map(|(j, t)| b.template(&format!("{path}.preface[{j}]"), t))
            .collect();
        if let Some(question) = question {
            nodes.push(QuestionNode {
                id: n.id.clone(),
                kind: n.kind,
                question,
                options,
                max_clarifications: n.max_clarifications.unwrap_or_else(|| doc.mode.default_clarifications()),
                extract: n.extract.clone(),
                branch_rules,
                default_target: n.default_target.clone(),
                assets: n.assets.clone(),
                followup_template,
                preface,
                paraphrase: n.paraphrase,
                identity_optin: n.identity_optin,
            });
        }
    }

    let knowledge_bases = doc
        .knowledge_bases
        .iter()
        .map(|k| match k {
            KbDoc::Id(id) => KbRef { id: id.clone(), kind: None, source: None },
            KbDoc::Full { id, kind, source } => KbRef { id: id.clone(), kind: *kind, source: source.clone() },
        })
        .collect();

    let m = doc.messages.clone().unwrap_or_default();
    let messages = FlowMessages {
        apology: b.message("messages.apology", m.apology.as_ref(), DEFAULT_APOLOGY),
        listening: b.message("messages.listening", m.listening.as_ref(), DEFAULT_LISTENING),
        other_prompt: b.message("messages.other_prompt", m.other_prompt.as_ref(), DEFAULT_OTHER_PROMPT),
        clarify_fallback: b.message("messages.clarify_fallback", m.clarify_fallback.as_ref(), DEFAULT_CLARIFY),
        closing: b.message("messages.closing", m.closing.as_ref(), DEFAULT_CLOSING),
    };

    if !b.errors.is_empty() {
        return Err(FlowParseError(b.errors));
    }
    Ok(FlowDefinition {
        id: doc.id,
        version: doc.version,
        mode: doc.mode,
        system_prompt: doc.system_prompt,
        config: doc.config,
        variables,
        nodes,
        goal: doc.goal,
        languages: doc.languages,
        knowledge_bases,
        messages,
    })
}

fn template_doc(t: &PromptTemplate) -> TemplateDoc {
    TemplateDoc::PerLanguage(t.variants().clone())
}

/// Serializes a flow back to its JSON document form.
pub fn serialize_flow(flow: &FlowDefinition) -> String {
    let doc = FlowDoc {
        id: flow.id.clone(),
        version: flow.version.clone(),
        mode: flow.mode,
        system_prompt: flow.system_prompt.clone(),
        config: flow.config.clone(),
        variables: flow
            .variables
            .iter()
            .map(|v| {
                let (kind, values) = match &v.kind {
                    VariableKind::String => ("string", None),
                    VariableKind::Number => ("number", None),
                    VariableKind::Boolean => ("boolean", None),
                    VariableKind::Enum(values) => ("enum", Some(values.clone())),
                };
                VariableDoc {
                    name: v.name.clone(),
                    kind: kind.into(),
                    values,
                    description: v.description.clone(),
                    required: v.required,
                }
            })
            .collect(),
        nodes: flow
            .nodes
            .iter()
            .map(|n| {
                let (template, variation_pool) = match &n.question {
                    QuestionText::Template(t) => (Some(template_doc(t)), None),
                    QuestionText::VariationPool(pool) => (None, Some(pool.iter().map(template_doc).collect())),
                };
                NodeDoc {
                    id: n.id.clone(),
                    kind: n.kind,
                    template,
                    variation_pool,
                    options: n
                        .options
                        .iter()
                        .map(|o| OptionDoc { id: o.id.clone(), label: template_doc(&o.label), other: o.other })
                        .collect(),
                    max_clarifications: Some(n.max_clarifications),
                    extract: n.extract.clone(),
                    branch_rules: n
                        .branch_rules
                        .iter()
                        .map(|r| BranchRuleDoc { when: r.when.to_string(), target: r.target.clone() })
                        .collect(),
                    default_target: n.default_target.clone(),
                    assets: n.assets.clone(),
                    followup_template: n.followup_template.as_ref().map(template_doc),
                    preface: n.preface.iter().map(template_doc).collect(),
                    paraphrase: n.paraphrase,
                    identity_optin: n.identity_optin,
                }
            })
            .collect(),
        goal: flow.goal.clone(),
        languages: flow.languages.clone(),
        knowledge_bases: flow
            .knowledge_bases
            .iter()
            .map(|k| KbDoc::Full { id: k.id.clone(), kind: k.kind, source: k.source.clone() })
            .collect(),
        messages: Some(MessagesDoc {
            apology: Some(template_doc(&flow.messages.apology)),
            listening: Some(template_doc(&flow.messages.listening)),
            other_prompt: Some(template_doc(&flow.messages.other_prompt)),
            clarify_fallback: Some(template_doc(&flow.messages.clarify_fallback)),
            closing: Some(template_doc(&flow.messages.closing)),
        }),
    };
    serde_json::to_string_pretty(&doc).expect("flow documents always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "id": "tiny", "version": "1", "mode": "structured", "system_prompt": "",
        "languages": ["en"],
        "nodes": [{"id": "q1", "kind": "open", "template": "How do you get to work?", "default_target": "END"}]
    }"#;

    #[test]
    fn minimal_structured_document() {
        let flow = parse_flow(MINIMAL).unwrap();
        assert_eq!(flow.nodes.len(), 1);
        assert_eq!(flow.mode, FlowMode::Structured);
        assert_eq!(flow.nodes[0].max_clarifications, 0);
        assert_eq!(flow.messages.closing.source("en"), Some(DEFAULT_CLOSING));
    }

    #[test]
    fn unknown_branch_target_is_schema_error() {
        let doc = r#"{
            "id": "f", "version": "1", "mode": "semi_structured", "languages": ["en"],
            "variables": [{"name": "rain", "kind": "boolean"}],
            "nodes": [
              {"id": "q1", "kind": "open", "template": "A?", "default_target": "q2",
               "branch_rules": [{"when": "rain", "target": "q2"}, {"when": "not rain", "target": "qX"}]},
              {"id": "q2", "kind": "open", "template": "B?", "default_target": "END"}
            ]
        }"#;
        let err = parse_flow(doc).unwrap_err();
        assert_eq!(err.0.len(), 1);
        assert!(matches!(&err.0[0], FlowError::Schema { path, .. } if path == "nodes[0].branch_rules[1]"));
    }

    #[test]
    fn syntax_error_has_line() {
        let err = parse_flow("{\n  \"id\": \"x\",\n  oops\n}").unwrap_err();
        assert!(matches!(err.0[0], FlowError::Syntax { line: 3, .. }));
    }

    #[test]
    fn missing_field_reports_path() {
        let doc = r#"{"id": "f", "version": "1", "mode": "structured", "languages": ["en"],
            "nodes": [{"id": "q1", "kind": "open", "template": "A?"}]}"#;
        let err = parse_flow(doc).unwrap_err();
        match &err.0[0] {
            FlowError::Schema { path, reason } => {
                assert_eq!(path, "nodes[0]");
                assert!(reason.contains("default_target"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn predicate_errors_are_collected() {
        let doc = r#"{"id": "f", "version": "1", "mode": "structured", "languages": ["en"],
            "nodes": [{"id": "q1", "kind": "open", "template": "A?", "default_target": "END",
                       "branch_rules": [{"when": "a ==", "target": "END"}, {"when": "(", "target": "END"}]}]}"#;
        let err = parse_flow(doc).unwrap_err();
        assert_eq!(err.0.len(), 2);
    }

    #[test]
    fn round_trip_minimal() {
        let flow = parse_flow(MINIMAL).unwrap();
        assert_eq!(parse_flow(&serialize_flow(&flow)).unwrap(), flow);
    }
}
