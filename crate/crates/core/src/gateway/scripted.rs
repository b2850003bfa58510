use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendReply, Locality, ModelRequest};
use crate::engine::Input;
use crate::flow::ModelRole;

/// Role name used for simulated participant turns inside a fixture file.
pub const PARTICIPANT_ROLE: &str = "participant";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatchSpec {
    /// 1-based index of the call for this role within the session.
    Ordinal(u32),
    /// Substring of the system or user prompt.
    Substring(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureEntry {
    pub role: String,
    #[serde(rename = "match", default, skip_serializing_if = "Option::is_none")]
    pub matcher: Option<MatchSpec>,
    #[serde(default)]
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
    /// Participant entries only: a button press instead of typed text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option_id: Option<String>,
}

/// A fixture file split into backend entries and participant turns.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Fixture {
    pub backend: Vec<(ModelRole, FixtureEntry)>,
    pub participant: Vec<Input>,
}

impl Fixture {
    pub fn parse(json: &str) -> Result<Self, String> {
        let entries: Vec<FixtureEntry> = serde_json::from_str(json).map_err(|e| e.to_string())?;
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<FixtureEntry>) -> Result<Self, String> {
        let mut out = Fixture::default();
        for (i, e) in entries.into_iter().enumerate() {
            if e.role == PARTICIPANT_ROLE {
                out.participant.push(match e.option_id {
                    Some(id) => Input::Choice(id),
                    None => Input::Text(e.response),
                });
            } else {
                let role = ModelRole::parse(&e.role).ok_or_else(|| format!("entry {i}: unknown role `{}`", e.role))?;
                out.backend.push((role, e));
            }
        }
        Ok(out)
    }
}

/// Deterministic backend answering from fixture entries.
///
/// The first entry (in file order) whose role and match fit the request wins.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    id: String,
    locality: Locality,
    entries: Vec<(ModelRole, FixtureEntry)>,
    strict: bool,
    misses: Arc<Mutex<Vec<String>>>,
}

pub const CANNED_DEFAULT: &str = "OK";

impl ScriptedBackend {
    pub fn new(id: impl Into<String>, locality: Locality, entries: Vec<(ModelRole, FixtureEntry)>, strict: bool) -> Self {
        Self { id: id.into(), locality, entries, strict, misses: Arc::default() }
    }

    /// Same entries and miss log under another backend id.
    pub fn renamed(&self, id: impl Into<String>) -> Self {
        Self { id: id.into(), ..self.clone() }
    }

    /// Requests no entry matched, in call order.
    pub fn misses(&self) -> Vec<String> {
        self.misses.lock().unwrap().clone()
    }

    fn find(&self, req: &ModelRequest) -> Option<&FixtureEntry> {
        self.entries.iter().filter(|(role, _)| *role == req.role).map(|(_, e)| e).find(|e| match &e.matcher {
            None => true,
            Some(MatchSpec::Ordinal(n)) => *n == req.call_index,
            Some(MatchSpec::Substring(s)) => req.system_prompt.contains(s.as_str()) || req.user_prompt.contains(s.as_str()),
        })
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn locality(&self) -> Locality {
        self.locality
    }

    fn complete(&self, req: &ModelRequest) -> Result<BackendReply, BackendError> {
        match self.find(req) {
            Some(e) => Ok(BackendReply {
                text: e.response.clone(),
                prompt_tokens: e.prompt_tokens,
                completion_tokens: e.completion_tokens,
            }),
            None => {
                let miss = format!("no fixture entry for {} call #{}", req.role.as_str(), req.call_index);
                self.misses.lock().unwrap().push(miss.clone());
                if self.strict {
                    Err(BackendError::NoFixture(miss))
                } else {
                    Ok(BackendReply { text: CANNED_DEFAULT.into(), prompt_tokens: None, completion_tokens: None })
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::LocalityRequirement;

    fn req(role: ModelRole, call_index: u32, prompt: &str) -> ModelRequest {
        let mut r = ModelRequest::new(role, "", prompt, LocalityRequirement::CloudEligible);
        r.call_index = call_index;
        r
    }

    #[test]
    fn ordinal_and_substring() {
        let fx = Fixture::parse(
            r#"[
            {"role": "sufficiency_judge", "match": 2, "response": "0"},
            {"role": "sufficiency_judge", "match": "[ok]", "response": "1"},
            {"role": "participant", "response": "hello"},
            {"role": "participant", "option_id": "continue"},
            {"role": "clarifier", "match": 1, "response": "More?", "prompt_tokens": 7, "completion_tokens": 1}
        ]"#,
        )
        .unwrap();
        assert_eq!(fx.participant, vec![Input::Text("hello".into()), Input::Choice("continue".into())]);
        let b = ScriptedBackend::new("s", Locality::Local, fx.backend, true);
        assert_eq!(b.complete(&req(ModelRole::SufficiencyJudge, 2, "x")).unwrap().text, "0");
        assert_eq!(b.complete(&req(ModelRole::SufficiencyJudge, 1, "a [ok] b")).unwrap().text, "1");
        assert!(b.complete(&req(ModelRole::SufficiencyJudge, 1, "nothing")).is_err());
        let c = b.complete(&req(ModelRole::Clarifier, 1, "")).unwrap();
        assert_eq!((c.text.as_str(), c.prompt_tokens), ("More?", Some(7)));
    }

    #[test]
    fn lenient_mode_answers_default() {
        let b = ScriptedBackend::new("s", Locality::Local, Vec::new(), false);
        assert_eq!(b.complete(&req(ModelRole::Summarizer, 1, "")).unwrap().text, CANNED_DEFAULT);
    }

    #[test]
    fn unknown_role_rejected() {
        assert!(Fixture::parse(r#"[{"role": "oracle", "response": "x"}]"#).is_err());
    }
}
