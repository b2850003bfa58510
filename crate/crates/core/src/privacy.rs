//! Screening participant text for identity-exposing content, plus postal truncation and redaction.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiiCategory {
    Email,
    Phone,
    FullPostalCode,
    PersonName,
    Address,
    Other,
}

impl PiiCategory {
    pub const ALL: [PiiCategory; 6] = [
        PiiCategory::Email,
        PiiCategory::Phone,
        PiiCategory::FullPostalCode,
        PiiCategory::PersonName,
        PiiCategory::Address,
        PiiCategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PiiCategory::Email => "email",
            PiiCategory::Phone => "phone",
            PiiCategory::FullPostalCode => "full_postal_code",
            PiiCategory::PersonName => "person_name",
            PiiCategory::Address => "address",
            PiiCategory::Other => "other",
        }
    }

    fn placeholder_stem(self) -> &'static str {
        match self {
            PiiCategory::Email => "EMAIL",
            PiiCategory::Phone => "PHONE",
            PiiCategory::FullPostalCode => "POSTAL",
            PiiCategory::PersonName => "NAME",
            PiiCategory::Address => "ADDRESS",
            PiiCategory::Other => "PII",
        }
    }
}

impl fmt::Display for PiiCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PiiCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| format!("unknown category `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Clean,
    Pii,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Screener {
    RuleBased,
    Model,
}

/// Byte range `[start, end)` of flagged text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub category: PiiCategory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivacyVerdict {
    pub flag: Flag,
    pub spans: Vec<Span>,
    pub screener: Screener,
}

impl PrivacyVerdict {
    pub fn clean() -> Self {
        Self { flag: Flag::Clean, spans: Vec::new(), screener: Screener::RuleBased }
    }

    fn from_spans(spans: Vec<Span>, screener: Screener) -> Self {
        let spans = normalize_spans(spans);
        let flag = if spans.is_empty() { Flag::Clean } else { Flag::Pii };
        Self { flag, spans, screener }
    }

    pub fn is_clean(&self) -> bool {
        self.flag == Flag::Clean
    }

    /// The flagged substrings of `text` with their categories.
    pub fn flagged<'t>(&self, text: &'t str) -> Vec<(&'t str, PiiCategory)> {
        self.spans.iter().filter_map(|s| text.get(s.start..s.end).map(|t| (t, s.category))).collect()
    }

    /// Union with spans found by a model screener.
    pub fn merge_model(self, model_spans: Vec<Span>) -> Self {
        if model_spans.is_empty() {
            return self;
        }
        let mut spans = self.spans;
        spans.extend(model_spans);
        Self::from_spans(spans, Screener::Model)
    }
}

/// Sorts spans and folds overlaps so the result is disjoint.
fn normalize_spans(mut spans: Vec<Span>) -> Vec<Span> {
    spans.retain(|s| s.start < s.end);
    spans.sort_by_key(|s| (s.start, std::cmp::Reverse(s.end)));
    let mut out: Vec<Span> = Vec::new();
    for s in spans {
        match out.last_mut() {
            Some(last) if s.start < last.end => last.end = last.end.max(s.end),
            _ => out.push(s),
        }
    }
    out
}

static EMAIL: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"[A-Za-z0-9._%+\-]+@[A-Za-z0-9\-]+(?:\.[A-Za-z0-9\-]+)*\.[A-Za-z]{2,}").unwrap());
static PHONE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"(?:\+?1[\s.\-]?)?(?:\(\d{3}\)\s?|\d{3}[\s.\-]?)\d{3}[\s.\-]?\d{4}").unwrap());
static POSTAL: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"(?i)\b[ABCEGHJ-NPRSTVXY]\d[ABCEGHJ-NPRSTV-Z][ \-]?\d[ABCEGHJ-NPRSTV-Z]\d\b").unwrap()
});
static ADDRESS: Lazy<Regex> = Lazy::new(|| {
    Regex::new(
        r"\b\d{1,5}\s+(?:[A-Z][A-Za-z'\-]*\.?\s+){1,4}(?:Street|St|Avenue|Ave|Road|Rd|Boulevard|Blvd|Drive|Dr|Lane|Ln|Way|Court|Ct|Place|Pl|Crescent|Cres|Terrace|Highway|Hwy|Parkway|Pkwy)\b\.?",
    )
    .unwrap()
});

fn digit_bounded(text: &str, start: usize, end: usize) -> bool {
    let before = text[..start].chars().next_back();
    let after = text[end..].chars().next();
    !before.is_some_and(|c| c.is_ascii_alphanumeric()) && !after.is_some_and(|c| c.is_ascii_digit())
}

/// Deterministic pattern pass: email, North-American phone, full postal code, street address.
pub fn screen(text: &str) -> PrivacyVerdict {
    let mut spans = Vec::new();
    let mut push = |re: &Regex, category: PiiCategory, bounded: bool| {
        for m in re.find_iter(text) {
            if !bounded || digit_bounded(text, m.start(), m.end()) {
                spans.push(Span { start: m.start(), end: m.end(), category });
            }
        }
    };
    push(&EMAIL, PiiCategory::Email, false);
    push(&PHONE, PiiCategory::Phone, true);
    push(&POSTAL, PiiCategory::FullPostalCode, false);
    push(&ADDRESS, PiiCategory::Address, false);
    PrivacyVerdict::from_spans(spans, Screener::RuleBased)
}

/// Replaces every full postal code by its first three characters.
pub fn truncate_postal(text: &str) -> String {
    POSTAL.replace_all(text, |c: &regex::Captures<'_>| c[0][..3].to_string()).into_owned()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("span {start}..{end} is outside a text of {len} bytes")]
pub struct SpanOutOfBounds {
    pub start: usize,
    pub end: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RedactionResult {
    pub text: String,
    /// Flagged substring to placeholder; kept locally only.
    pub replacements: BTreeMap<String, String>,
}

/// Replaces flagged spans with category-numbered placeholders such as `⟨EMAIL_1⟩`.
///
/// Equal substrings share one placeholder.
pub fn redact(text: &str, verdict: &PrivacyVerdict) -> Result<RedactionResult, SpanOutOfBounds> {
    for s in &verdict.spans {
        if s.end > text.len() || s.start > s.end || !text.is_char_boundary(s.start) || !text.is_char_boundary(s.end) {
            return Err(SpanOutOfBounds { start: s.start, end: s.end, len: text.len() });
        }
    }
    let mut counters: BTreeMap<PiiCategory, usize> = BTreeMap::new();
    let mut replacements = BTreeMap::new();
    let mut out = String::with_capacity(text.len());
    let mut at = 0;
    for s in normalize_spans(verdict.spans.clone()) {
        out.push_str(&text[at..s.start]);
        let original = &text[s.start..s.end];
        let placeholder = replacements
            .entry(original.to_string())
            .or_insert_with(|| {
                let n = counters.entry(s.category).or_insert(0);
                *n += 1;
                format!("\u{27E8}{}_{}\u{27E9}", s.category.placeholder_stem(), n)
            })
            .clone();
        out.push_str(&placeholder);
        at = s.end;
    }
    out.push_str(&text[at..]);
    Ok(RedactionResult { text: out, replacements })
}

/// Spans covering every occurrence of the given substrings.
pub fn spans_of(text: &str, needles: &[(String, PiiCategory)]) -> Vec<Span> {
    let mut spans = Vec::new();
    for (needle, category) in needles {
        if needle.is_empty() {
            continue;
        }
        spans.extend(text.match_indices(needle.as_str()).map(|(i, m)| Span {
            start: i,
            end: i + m.len(),
            category: *category,
        }));
    }
    spans
}

/// Screens and redacts in one step, also covering any previously flagged substrings.
pub fn scrub(text: &str, known: &[(String, PiiCategory)]) -> RedactionResult {
    let truncated = truncate_postal(text);
    let mut spans = screen(&truncated).spans;
    spans.extend(spans_of(&truncated, known));
    let verdict = PrivacyVerdict::from_spans(spans, Screener::RuleBased);
    redact(&truncated, &verdict).expect("spans computed on this text")
}

/// Expected label of one corpus line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusLabel {
    Clean,
    Pii(PiiCategory),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusItem {
    pub label: CorpusLabel,
    pub text: String,
}

/// Parses `label<TAB>text` lines; labels are `clean` or `pii:<category>`.
pub fn parse_corpus(src: &str) -> Result<Vec<CorpusItem>, String> {
    src.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (label, text) = line.split_once('\t').ok_or_else(|| format!("line {}: missing tab", i + 1))?;
            let label = match label {
                "clean" => CorpusLabel::Clean,
                other => match other.strip_prefix("pii:") {
                    Some(cat) => CorpusLabel::Pii(cat.parse().map_err(|e| format!("line {}: {e}", i + 1))?),
                    None => return Err(format!("line {}: bad label `{other}`", i + 1)),
                },
            };
            Ok(CorpusItem { label, text: text.to_string() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_sentence() {
        assert!(screen("I usually bike to campus").is_clean());
    }

    #[test]
    fn email_flagged() {
        let text = "reach me at jane@example.org";
        let v = screen(text);
        assert_eq!(v.flag, Flag::Pii);
        assert_eq!(v.flagged(text), vec![("jane@example.org", PiiCategory::Email)]);
    }

    #[test]
    fn phone_and_address() {
        let text = "Call 514-555-0199 or visit 845 Sherbrooke Street West";
        let cats: Vec<_> = screen(text).flagged(text).into_iter().map(|(_, c)| c).collect();
        assert_eq!(cats, vec![PiiCategory::Phone, PiiCategory::Address]);
        assert!(screen("I ride 3 days a week, 20 km each way").is_clean());
    }

    #[test]
    fn postal_truncation() {
        assert_eq!(truncate_postal("H3A 0C3"), "H3A");
        assert_eq!(truncate_postal("H3A"), "H3A");
        assert_eq!(truncate_postal("no code here"), "no code here");
        assert_eq!(truncate_postal("I live near h2x1y4, downtown"), "I live near h2x, downtown");
    }

    #[test]
    fn redaction_placeholders() {
        let text = "a@b.co wrote to c@d.co and a@b.co again";
        let r = redact(text, &screen(text)).unwrap();
        assert_eq!(r.text, "⟨EMAIL_1⟩ wrote to ⟨EMAIL_2⟩ and ⟨EMAIL_1⟩ again");
        assert_eq!(r.replacements.len(), 2);
        let again = redact(&r.text, &screen(&r.text)).unwrap();
        assert_eq!(again.text, r.text);
        assert!(redact(text, &PrivacyVerdict::clean()).unwrap().replacements.is_empty());
    }

    #[test]
    fn stale_verdict_rejected() {
        let v = screen("reach me at jane@example.org");
        assert!(redact("short", &v).is_err());
    }

    #[test]
    fn overlapping_spans_merge() {
        let spans = normalize_spans(vec![
            Span { start: 0, end: 5, category: PiiCategory::Email },
            Span { start: 3, end: 8, category: PiiCategory::Other },
            Span { start: 10, end: 12, category: PiiCategory::Phone },
        ]);
        assert_eq!(spans.len(), 2);
        assert_eq!((spans[0].start, spans[0].end), (0, 8));
    }
}
