//! Prompt templates with `{variable}` placeholders and per-language variants.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use super::value::VariableVector;

/// Reserved placeholder that renders to the session's language tag.
pub const LANGUAGE_PLACEHOLDER: &str = "language";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unbound placeholder `{0}`")]
    UnboundPlaceholder(String),
    #[error("unknown language `{0}`")]
    UnknownLanguage(String),
    #[error("malformed placeholder at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

/// Parsed form of one language variant.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Pattern {
    segments: Vec<Segment>,
}

impl Pattern {
    fn parse(text: &str) -> Result<Self, TemplateError> {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let bytes = text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    literal.push('{');
                    i += 2;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    literal.push('}');
                    i += 2;
                }
                b'{' => {
                    let close = text[i + 1..].find('}').ok_or_else(|| TemplateError::Malformed {
                        offset: i,
                        reason: "unterminated placeholder".into(),
                    })?;
                    let name = &text[i + 1..i + 1 + close];
                    if !is_identifier(name) {
                        return Err(TemplateError::Malformed {
                            offset: i,
                            reason: format!("`{name}` is not an identifier"),
                        });
                    }
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(Segment::Placeholder(name.to_string()));
                    i += close + 2;
                }
                _ => {
                    // Advance a whole UTF-8 character.
                    let ch = text[i..].chars().next().expect("in bounds");
                    literal.push(ch);
                    i += ch.len_utf8();
                }
            }
        }
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(Self { segments })
    }
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// A prompt template: source text per language tag.
#[derive(Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    variants: BTreeMap<String, String>,
    parsed: BTreeMap<String, Pattern>,
}

impl fmt::Debug for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("PromptTemplate").field(&self.variants).finish()
    }
}

impl PromptTemplate {
    /// Builds a template from `(language, text)` pairs.
    pub fn new<I, L, T>(variants: I) -> Result<Self, TemplateError>
    where
        I: IntoIterator<Item = (L, T)>,
        L: Into<String>,
        T: Into<String>,
    {
        let mut out = Self { variants: BTreeMap::new(), parsed: BTreeMap::new() };
        for (lang, text) in variants {
            let (lang, text) = (lang.into(), text.into());
            out.parsed.insert(lang.clone(), Pattern::parse(&text)?);
            out.variants.insert(lang, text);
        }
        Ok(out)
    }

    /// Same text for every listed language.
    pub fn uniform(text: &str, languages: &[String]) -> Result<Self, TemplateError> {
        Self::new(languages.iter().map(|l| (l.clone(), text.to_string())))
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.variants.keys().map(String::as_str)
    }

    pub fn has_language(&self, lang: &str) -> bool {
        self.variants.contains_key(lang)
    }

    pub fn source(&self, lang: &str) -> Option<&str> {
        self.variants.get(lang).map(String::as_str)
    }

    pub fn variants(&self) -> &BTreeMap<String, String> {
        &self.variants
    }

    /// Placeholder names across all variants, sorted and deduplicated.
    pub fn placeholders(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .parsed
            .values()
            .flat_map(|p| p.segments.iter())
            .filter_map(|s| match s {
                Segment::Placeholder(n) => Some(n.clone()),
                Segment::Literal(_) => None,
            })
            .collect();
        names.sort();
        names.dedup();
        names
    }

    /// Substitutes bound variables into the `lang` variant.
    pub fn render(&self, vars: &VariableVector, lang: &str) -> Result<String, TemplateError> {
        let pattern = self
            .parsed
            .get(lang)
            .ok_or_else(|| TemplateError::UnknownLanguage(lang.to_string()))?;
        let mut out = String::new();
        for seg in &pattern.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Placeholder(name) if name == LANGUAGE_PLACEHOLDER => out.push_str(lang),
                Segment::Placeholder(name) => match vars.get(name) {
                    Some(v) => out.push_str(&v.to_string()),
                    None => return Err(TemplateError::UnboundPlaceholder(name.clone())),
                },
            }
        }
        Ok(out)
    }

    /// Like [`render`](Self::render) but unbound placeholders render empty; returns their names.
    pub fn render_lenient(&self, vars: &VariableVector, lang: &str) -> Result<(String, Vec<String>), TemplateError> {
        let pattern = self
            .parsed
            .get(lang)
            .ok_or_else(|| TemplateError::UnknownLanguage(lang.to_string()))?;
        let mut out = String::new();
        let mut missing = Vec::new();
        for seg in &pattern.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Placeholder(name) if name == LANGUAGE_PLACEHOLDER => out.push_str(lang),
                Segment::Placeholder(name) => match vars.get(name) {
                    Some(v) => out.push_str(&v.to_string()),
                    None => missing.push(name.clone()),
                },
            }
        }
        Ok((out, missing))
    }
}
