use once_cell::sync::Lazy;
use regex::Regex;

use super::{hint, Backend, BackendError, BackendReply, Locality, ModelRequest};
use crate::flow::ModelRole;
use crate::text::{terms, words};

/// Offline heuristic backend covering every role; useful without any model service.
#[derive(Debug, Clone)]
pub struct RuleBackend {
    id: String,
}

impl Default for RuleBackend {
    fn default() -> Self {
        Self::new("rules")
    }
}

static NUMBER: Lazy<Regex> = Lazy::new(|| Regex::new(r"-?\d+(?:\.\d+)?").unwrap());

const ORDINALS: [&[&str]; 6] = [
    &["first", "1", "1st"],
    &["second", "2", "two", "2nd"],
    &["third", "3", "three", "3rd"],
    &["fourth", "4", "four", "4th"],
    &["fifth", "5", "five", "5th"],
    &["sixth", "6", "six", "6th"],
];

/// Requests aimed at the agent rather than answers to the question.
fn is_off_topic(question: &str, response: &str) -> bool {
    let r = response.to_lowercase();
    if r.contains("joke") || r.starts_with("tell me") || r.contains("who are you") || r.contains("are you a bot") {
        return true;
    }
    let q: Vec<String> = terms(question);
    let rt: Vec<String> = terms(response);
    !q.is_empty() && !rt.is_empty() && rt.len() <= q.len() + 1 && q.iter().all(|t| rt.contains(t))
}

impl RuleBackend {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into() }
    }

    fn judge(req: &ModelRequest) -> String {
        let q = req.hints.get(hint::QUESTION).map(String::as_str).unwrap_or("");
        let r = req.hints.get(hint::RESPONSE).map(String::as_str).unwrap_or("");
        if is_off_topic(q, r) {
            "OFFTOPIC the reply addresses the agent, not the question".into()
        } else if terms(r).len() >= 3 {
            "1 the reply addresses the question".into()
        } else {
            "0 the reply is too brief".into()
        }
    }

    fn extract(req: &ModelRequest) -> String {
        let r = req.hints.get(hint::RESPONSE).map(String::as_str).unwrap_or("");
        let kind = req.hints.get(hint::KIND).map(String::as_str).unwrap_or("string");
        let ws = words(r);
        match kind {
            "number" => NUMBER.find(r).map(|m| m.as_str().to_string()),
            "boolean" => {
                if ws.iter().any(|w| matches!(w.as_str(), "no" | "not" | "never" | "false" | "don't")) {
                    Some("false".into())
                } else if ws.iter().any(|w| matches!(w.as_str(), "yes" | "yeah" | "true" | "always" | "often")) {
                    Some("true".into())
                } else {
                    None
                }
            }
            "enum" => req
                .hints
                .get(hint::VALUES)
                .into_iter()
                .flat_map(|v| v.split(','))
                .map(str::trim)
                .find(|v| ws.iter().any(|w| w.eq_ignore_ascii_case(v)))
                .map(str::to_string),
            _ => Some(r.trim().to_string()).filter(|s| !s.is_empty()),
        }
        .unwrap_or_else(|| "NULL".into())
    }

    fn match_option(req: &ModelRequest) -> String {
        let r = req.hints.get(hint::RESPONSE).map(String::as_str).unwrap_or("");
        if is_off_topic("", r) {
            return "OFFTOPIC".into();
        }
        let options: Vec<(&str, &str)> = req
            .hints
            .get(hint::OPTIONS)
            .map(|o| o.lines().filter_map(|l| l.split_once('\t')).collect())
            .unwrap_or_default();
        let ws = words(r);
        for (i, names) in ORDINALS.iter().enumerate() {
            if i < options.len() && ws.iter().any(|w| names.contains(&w.as_str())) {
                return options[i].0.to_string();
            }
        }
        let rt = terms(r);
        let best = options
            .iter()
            .map(|(id, label)| (terms(label).iter().filter(|t| rt.contains(t)).count(), *id))
            .filter(|(n, _)| *n > 0)
            .max_by_key(|(n, _)| *n);
        best.map(|(_, id)| id.to_string()).unwrap_or_else(|| "NONE".into())
    }
}

impl Backend for RuleBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn locality(&self) -> Locality {
        Locality::Local
    }

    fn complete(&self, req: &ModelRequest) -> Result<BackendReply, BackendError> {
        let text = match req.role {
            ModelRole::QuestionGen => req
                .hints
                .get(hint::QUESTION)
                .cloned()
                .unwrap_or_else(|| req.user_prompt.lines().last().unwrap_or("").to_string()),
            ModelRole::SufficiencyJudge => Self::judge(req),
            ModelRole::Clarifier => "Could you please provide more details?".into(),
            ModelRole::Extractor => Self::extract(req),
            ModelRole::Summarizer => {
                let r = req.hints.get(hint::RESPONSE).map(|s| s.trim()).unwrap_or("");
                format!("So you mentioned: {r} Thank you for your response.")
            }
            ModelRole::IntentMatcher => Self::match_option(req),
            ModelRole::PiiScreener => "NONE".into(),
            ModelRole::GoalJudge => "0".into(),
        };
        Ok(BackendReply { text, prompt_tokens: None, completion_tokens: None })
    }
}
