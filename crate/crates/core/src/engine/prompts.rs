//! Prompt text for each model role and parsers for their replies.

use crate::flow::{Value, VariableKind, VariableSpec};

/// A judge verdict parsed from a reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Judgement {
    Sufficient,
    Insufficient,
    /// The reply addresses the agent rather than the question.
    OffTopic,
}

/// Reads the first word of a judge reply; the rest is kept as the rationale.
pub fn parse_judgement(reply: &str) -> Option<(Judgement, String)> {
    let trimmed = reply.trim();
    let (head, rest) = trimmed.split_once(char::is_whitespace).unwrap_or((trimmed, ""));
    let head = head.trim_matches(|c: char| !c.is_alphanumeric() && c != '-' && c != '_').to_ascii_lowercase();
    let j = match head.as_str() {
        "1" | "yes" | "sufficient" | "true" => Judgement::Sufficient,
        "0" | "no" | "insufficient" | "false" => Judgement::Insufficient,
        "offtopic" | "off-topic" | "off_topic" | "erratic" => Judgement::OffTopic,
        _ => return None,
    };
    Some((j, rest.trim().to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Intent {
    Option(String),
    NoMatch,
    OffTopic,
}

/// Reads an intent-matcher reply: an option id, a 1-based index, `NONE` or `OFFTOPIC`.
pub fn parse_intent(reply: &str, option_ids: &[&str]) -> Intent {
    let head = reply.split_whitespace().next().unwrap_or("");
    let head = head.trim_matches(|c: char| !c.is_alphanumeric() && c != '-' && c != '_');
    if let Some(id) = option_ids.iter().find(|id| id.eq_ignore_ascii_case(head)) {
        return Intent::Option(id.to_string());
    }
    if let Ok(i) = head.parse::<usize>() {
        if (1..=option_ids.len()).contains(&i) {
            return Intent::Option(option_ids[i - 1].to_string());
        }
    }
    match head.to_ascii_lowercase().as_str() {
        "offtopic" | "off-topic" | "off_topic" | "erratic" => Intent::OffTopic,
        _ => Intent::NoMatch,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoerceError {
    Null,
    Mismatch(String),
}

/// Turns raw model or option text into a value of the variable's kind.
pub fn coerce(raw: &str, kind: &VariableKind) -> Result<Value, CoerceError> {
    let s = raw.trim().trim_end_matches('.').trim_matches(['"', '\'', '`']).trim().trim_end_matches('.').trim();
    if s.is_empty() || s.eq_ignore_ascii_case("null") || s.eq_ignore_ascii_case("none") {
        return Err(CoerceError::Null);
    }
    match kind {
        VariableKind::String => Ok(Value::Str(s.to_string())),
        VariableKind::Number => s
            .parse::<f64>()
            .ok()
            .filter(|n| n.is_finite())
            .map(Value::Number)
            .ok_or_else(|| CoerceError::Mismatch(format!("`{s}` is not a number"))),
        VariableKind::Boolean => match s.to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" => Ok(Value::Bool(true)),
            "false" | "no" | "0" => Ok(Value::Bool(false)),
            _ => Err(CoerceError::Mismatch(format!("`{s}` is not a boolean"))),
        },
        VariableKind::Enum(values) => values
            .iter()
            .find(|v| v.eq_ignore_ascii_case(s))
            .map(|v| Value::Str(v.clone()))
            .ok_or_else(|| CoerceError::Mismatch(format!("`{s}` is not one of {}", values.join(", ")))),
    }
}

/// Renders `(is_agent, text)` pairs as `Q:`/`A:` lines.
pub fn exchange(lines: &[(bool, &str)]) -> String {
    lines
        .iter()
        .map(|(agent, text)| format!("{} {}", if *agent { "Q:" } else { "A:" }, text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn glossary_section(glossary: &[String]) -> String {
    if glossary.is_empty() {
        String::new()
    } else {
        let items: Vec<String> = glossary.iter().map(|g| format!("- {g}")).collect();
        format!("\nGlossary:\n{}", items.join("\n"))
    }
}

pub fn judge(slice: &str, context: &str, glossary: &[String]) -> String {
    format!(
        "Decide whether the participant's answers below address the interview question.\n\
         Context:\n{context}\n\
         Exchange:\n{slice}{}\n\
         Reply 1 if they do, 0 if more detail is needed, or OFFTOPIC if the participant is \
         addressing you instead of answering. Add a short reason after the verdict.",
        glossary_section(glossary)
    )
}

pub fn clarifier(slice: &str, context: &str, instruction: Option<&str>, language: &str) -> String {
    let instruction = instruction.unwrap_or(
        "The answer does not fully address the question. Briefly acknowledge it, then ask one \
         follow-up question about what is missing.",
    );
    format!("{instruction}\nContext:\n{context}\nExchange:\n{slice}\nWrite in language `{language}`. Reply with the message only.")
}

pub fn summarizer(slice: &str, context: &str, glossary: &[String], language: &str) -> String {
    format!(
        "Paraphrase the participant's answer back to them in a few sentences, then thank them.\n\
         Context:\n{context}\n\
         Exchange:\n{slice}{}\n\
         Write in language `{language}`. Reply with the message only.",
        glossary_section(glossary)
    )
}

pub fn extractor(spec: &VariableSpec, slice: &str) -> String {
    format!(
        "Extract the value of `{}` ({}): {}\nExchange:\n{slice}\nReply with the value only, or NULL if the exchange does not give it.",
        spec.name,
        spec.kind.describe(),
        spec.description
    )
}

pub fn intent(question: &str, options: &[(String, String)], utterance: &str) -> String {
    let list: Vec<String> = options.iter().map(|(id, label)| format!("{id}: {label}")).collect();
    format!(
        "Question: {question}\nOptions:\n{}\nReply: {utterance}\n\
         Which option does the reply choose? Answer with the option id, NONE if it fits none, \
         or OFFTOPIC if it does not answer the question.",
        list.join("\n")
    )
}

pub fn rephrase(question: &str, context: &str, language: &str) -> String {
    format!(
        "Rephrase this interview question for the participant without changing its meaning.\n\
         Context:\n{context}\nQuestion: {question}\nWrite in language `{language}`. Reply with the question only."
    )
}

pub fn generate(goal: &str, instruction: &str, context: &str, language: &str) -> String {
    format!(
        "Interview goal: {goal}\n{instruction}\nConversation so far:\n{context}\n\
         Ask the single next question that best advances the goal. Write in language `{language}`. \
         Reply with the question only."
    )
}

pub fn goal(goal: &str, context: &str) -> String {
    format!("Interview goal: {goal}\nConversation so far:\n{context}\nReply 1 if the goal has been reached, otherwise 0.")
}
