//! Role-based access to language-model backends with privacy routing and token accounting.

mod http;
mod ledger;
mod rules;
mod scripted;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{ModelRole, PrivacyPolicy, SystemConfig};
use crate::privacy::{self, PiiCategory, PrivacyVerdict, Span};
use crate::text::{approx_tokens, truncate_chars};

pub use http::{HttpBackend, HttpConfig};
pub use ledger::{TokenLedger, TokenSample, Totals};
pub use rules::RuleBackend;
pub use scripted::{
    Fixture, FixtureEntry, MatchSpec, ScriptedBackend, CANNED_DEFAULT, PARTICIPANT_ROLE,
};

/// Structured request fields that rule-based backends read instead of parsing prompts.
pub mod hint {
    pub const QUESTION: &str = "question";
    pub const RESPONSE: &str = "response";
    /// One `id<TAB>label` line per option.
    pub const OPTIONS: &str = "options";
    pub const VARIABLE: &str = "variable";
    pub const KIND: &str = "kind";
    /// Comma-separated enum values.
    pub const VALUES: &str = "values";
    pub const GOAL: &str = "goal";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Locality {
    Local,
    Cloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalityRequirement {
    LocalOnly,
    CloudEligible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub role: ModelRole,
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_output_chars: usize,
    pub locality: LocalityRequirement,
    pub session_id: String,
    pub seed: Option<u64>,
    /// Participant turn the call belongs to.
    pub turn: u32,
    /// 1-based index of this call among the session's calls for `role`; set by the gateway.
    pub call_index: u32,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hints: BTreeMap<String, String>,
}

impl ModelRequest {
    pub fn new(role: ModelRole, system_prompt: &str, user_prompt: &str, locality: LocalityRequirement) -> Self {
        Self {
            role,
            system_prompt: system_prompt.to_string(),
            user_prompt: user_prompt.to_string(),
            temperature: 0.0,
            max_output_chars: 4000,
            locality,
            session_id: String::new(),
            seed: None,
            turn: 0,
            call_index: 0,
            hints: BTreeMap::new(),
        }
    }

    pub fn hint(mut self, key: &str, value: impl Into<String>) -> Self {
        self.hints.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelResponse {
    pub text: String,
    pub backend_id: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency: Duration,
    /// Degradations worth recording in the transcript.
    pub notes: Vec<String>,
}

/// What a backend returns; missing token counts are approximated by the gateway.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend timed out")]
    Timeout,
    #[error("backend failed: {0}")]
    Failed(String),
    #[error("{0}")]
    NoFixture(String),
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn locality(&self) -> Locality;
    fn complete(&self, req: &ModelRequest) -> Result<BackendReply, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("role {0:?} is not bound to a backend")]
    UnboundRole(ModelRole),
    #[error("backend `{0}` is not registered")]
    BackendUnavailable(String),
    #[error("local-only request cannot go to cloud backend `{0}`")]
    LocalityViolation(String),
    #[error("no local backend is available for flagged content")]
    NoEligibleBackend,
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("backend `{backend}`: {source}")]
    Backend { backend: String, source: BackendError },
}

impl GatewayError {
    pub fn is_timeout(&self) -> bool {
        matches!(self, GatewayError::Backend { source: BackendError::Timeout, .. })
    }
}

/// One request as actually sent to a backend.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispatchRecord {
    pub session_id: String,
    pub role: ModelRole,
    pub backend: String,
    pub locality: Locality,
    pub turn: u32,
    pub system_prompt: String,
    pub user_prompt: String,
}

#[derive(Debug, Default)]
struct SessionAccounts {
    ledger: TokenLedger,
    /// Substrings flagged for this session; stripped from every later cloud prompt.
    flagged: Vec<(String, PiiCategory)>,
}

pub struct Gateway {
    backends: RwLock<BTreeMap<String, Arc<dyn Backend>>>,
    sessions: Mutex<HashMap<String, SessionAccounts>>,
    log: Option<Mutex<Vec<DispatchRecord>>>,
    retries: u32,
}

impl Default for Gateway {
    fn default() -> Self {
        Self::new()
    }
}

impl Gateway {
    pub fn new() -> Self {
        Self { backends: RwLock::new(BTreeMap::new()), sessions: Mutex::new(HashMap::new()), log: None, retries: 1 }
    }

    /// Keeps a copy of every dispatched request.
    pub fn with_request_log(mut self) -> Self {
        self.log = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn register(&self, backend: Arc<dyn Backend>) {
        self.backends.write().unwrap().insert(backend.id().to_string(), backend);
    }

    pub fn backend_ids(&self) -> Vec<String> {
        self.backends.read().unwrap().keys().cloned().collect()
    }

    fn backend(&self, id: &str) -> Result<Arc<dyn Backend>, GatewayError> {
        self.backends.read().unwrap().get(id).cloned().ok_or_else(|| GatewayError::BackendUnavailable(id.to_string()))
    }

    pub fn open_session(&self, session_id: &str) {
        self.sessions.lock().unwrap().entry(session_id.to_string()).or_default();
    }

    /// Reinstates a persisted ledger, replacing any in-memory one.
    pub fn restore_session(&self, session_id: &str, ledger: TokenLedger) {
        let mut sessions = self.sessions.lock().unwrap();
        sessions.entry(session_id.to_string()).or_default().ledger = ledger;
    }

    pub fn report_tokens(&self, session_id: &str) -> Result<TokenLedger, GatewayError> {
        self.sessions
            .lock()
            .unwrap()
            .get(session_id)
            .map(|a| a.ledger.clone())
            .ok_or_else(|| GatewayError::UnknownSession(session_id.to_string()))
    }

    /// Drops in-memory state for a session and returns its ledger.
    pub fn close_session(&self, session_id: &str) -> Option<TokenLedger> {
        self.sessions.lock().unwrap().remove(session_id).map(|a| a.ledger)
    }

    pub fn dispatch_log(&self) -> Vec<DispatchRecord> {
        self.log.as_ref().map(|l| l.lock().unwrap().clone()).unwrap_or_default()
    }

    /// Every substring flagged so far for the session.
    pub fn flagged(&self, session_id: &str) -> Vec<(String, PiiCategory)> {
        self.sessions.lock().unwrap().get(session_id).map(|a| a.flagged.clone()).unwrap_or_default()
    }

    fn local_fallback(&self, cfg: &SystemConfig) -> Option<String> {
        let backends = self.backends.read().unwrap();
        std::iter::once(ModelRole::PiiScreener)
            .chain(ModelRole::ALL)
            .filter_map(|r| cfg.model_bindings.get(&r))
            .find(|id| backends.get(id.as_str()).is_some_and(|b| b.locality() == Locality::Local))
            .cloned()
    }

    /// Picks the backend for a request given its privacy verdict.
    pub fn route(&self, req: &ModelRequest, verdict: &PrivacyVerdict, cfg: &SystemConfig) -> Result<String, GatewayError> {
        let bound = cfg.model_bindings.get(&req.role).ok_or(GatewayError::UnboundRole(req.role))?;
        if self.backend(bound)?.locality() == Locality::Local {
            return Ok(bound.clone());
        }
        if req.locality == LocalityRequirement::LocalOnly {
            return self.local_fallback(cfg).ok_or_else(|| GatewayError::LocalityViolation(bound.clone()));
        }
        if verdict.is_clean() {
            return Ok(bound.clone());
        }
        match cfg.privacy_policy {
            PrivacyPolicy::LocalOnly => self.local_fallback(cfg).ok_or(GatewayError::NoEligibleBackend),
            PrivacyPolicy::RedactThenCloud => Ok(bound.clone()),
        }
    }

    /// Rule screen plus the optional local model screener; flagged substrings are remembered.
    pub fn screen(&self, session_id: &str, text: &str, cfg: &SystemConfig, turn: u32) -> (PrivacyVerdict, Vec<String>) {
        let mut verdict = privacy::screen(text);
        let mut notes = Vec::new();
        if let Some(id) = cfg.model_bindings.get(&ModelRole::PiiScreener) {
            match self.model_screen(session_id, id, text, cfg, turn) {
                Ok(spans) => verdict = verdict.merge_model(spans),
                Err(e) => notes.push(format!("model screener unavailable, rule-based screening only: {e}")),
            }
        }
        let found: Vec<(String, PiiCategory)> =
            verdict.flagged(text).into_iter().map(|(s, c)| (s.to_string(), c)).collect();
        if !found.is_empty() {
            let mut sessions = self.sessions.lock().unwrap();
            let acc = sessions.entry(session_id.to_string()).or_default();
            for f in found {
                if !acc.flagged.contains(&f) {
                    acc.flagged.push(f);
                }
            }
        }
        (verdict, notes)
    }

    fn model_screen(
        &self,
        session_id: &str,
        backend_id: &str,
        text: &str,
        cfg: &SystemConfig,
        turn: u32,
    ) -> Result<Vec<Span>, GatewayError> {
        let backend = self.backend(backend_id)?;
        if backend.locality() != Locality::Local {
            return Err(GatewayError::LocalityViolation(backend_id.to_string()));
        }
        let prompt = format!(
            "List every piece of identity-exposing information in the text below, one per line as \
             `category: exact text` with category one of email, phone, full_postal_code, person_name, \
             address, other. Reply NONE if there is none.\n\nText:\n{text}"
        );
        let mut req = ModelRequest::new(ModelRole::PiiScreener, "", &prompt, LocalityRequirement::LocalOnly);
        req.session_id = session_id.to_string();
        req.turn = turn;
        req.temperature = 0.0;
        req.max_output_chars = cfg.max_output_chars;
        let resp = self.dispatch(backend.as_ref(), req)?;
        let mut needles = Vec::new();
        for line in resp.text.lines() {
            let Some((cat, found)) = line.split_once(':') else { continue };
            let cat = cat.trim().trim_start_matches(['-', '*', ' ']).to_ascii_lowercase();
            let Ok(category) = cat.parse::<PiiCategory>() else { continue };
            let found = found.trim().trim_matches('`').trim();
            if !found.is_empty() {
                needles.push((found.to_string(), category));
            }
        }
        Ok(privacy::spans_of(text, &needles))
    }

    /// Screens, routes, dispatches and records one request.
    pub fn complete(&self, req: ModelRequest, cfg: &SystemConfig) -> Result<ModelResponse, GatewayError> {
        self.open_session(&req.session_id);
        let bound = cfg.model_bindings.get(&req.role).ok_or(GatewayError::UnboundRole(req.role))?;
        let bound_backend = self.backend(bound)?;
        let mut notes = Vec::new();
        let mut req = req;
        let backend = if bound_backend.locality() == Locality::Local {
            bound_backend
        } else {
            let combined = format!("{}\n{}", req.system_prompt, req.user_prompt);
            let (mut verdict, screen_notes) = self.screen(&req.session_id, &combined, cfg, req.turn);
            notes.extend(screen_notes);
            let known = self.flagged(&req.session_id);
            if verdict.is_clean() && !privacy::spans_of(&combined, &known).is_empty() {
                verdict = verdict.merge_model(privacy::spans_of(&combined, &known));
            }
            let id = self.route(&req, &verdict, cfg)?;
            let target = self.backend(&id)?;
            if target.locality() == Locality::Cloud && !verdict.is_clean() {
                req.system_prompt = privacy::scrub(&req.system_prompt, &known).text;
                req.user_prompt = privacy::scrub(&req.user_prompt, &known).text;
                req.hints.clear();
            }
            target
        };
        let mut resp = self.dispatch(backend.as_ref(), req)?;
        resp.notes.splice(0..0, notes);
        Ok(resp)
    }

    fn dispatch(&self, backend: &dyn Backend, mut req: ModelRequest) -> Result<ModelResponse, GatewayError> {
        {
            let mut sessions = self.sessions.lock().unwrap();
            let acc = sessions.entry(req.session_id.clone()).or_default();
            req.call_index = acc.ledger.calls(req.role) as u32 + 1;
        }
        if let Some(log) = &self.log {
            log.lock().unwrap().push(DispatchRecord {
                session_id: req.session_id.clone(),
                role: req.role,
                backend: backend.id().to_string(),
                locality: backend.locality(),
                turn: req.turn,
                system_prompt: req.system_prompt.clone(),
                user_prompt: req.user_prompt.clone(),
            });
        }
        let started = Instant::now();
        let mut attempt = 0;
        let reply = loop {
            match backend.complete(&req) {
                Err(BackendError::Timeout) if attempt < self.retries => attempt += 1,
                Err(source) => return Err(GatewayError::Backend { backend: backend.id().to_string(), source }),
                Ok(r) => break r,
            }
        };
        let text = truncate_chars(&reply.text, req.max_output_chars).to_string();
        let prompt_tokens =
            reply.prompt_tokens.unwrap_or_else(|| approx_tokens(&req.system_prompt) + approx_tokens(&req.user_prompt));
        let completion_tokens = reply.completion_tokens.unwrap_or_else(|| approx_tokens(&text));
        self.sessions.lock().unwrap().entry(req.session_id.clone()).or_default().ledger.record(TokenSample {
            turn: req.turn,
            role: req.role,
            backend: backend.id().to_string(),
            prompt_tokens,
            completion_tokens,
        });
        Ok(ModelResponse {
            text,
            backend_id: backend.id().to_string(),
            prompt_tokens,
            completion_tokens,
            latency: started.elapsed(),
            notes: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo {
        id: &'static str,
        locality: Locality,
    }

    impl Backend for Echo {
        fn id(&self) -> &str {
            self.id
        }
        fn locality(&self) -> Locality {
            self.locality
        }
        fn complete(&self, req: &ModelRequest) -> Result<BackendReply, BackendError> {
            Ok(BackendReply { text: req.user_prompt.clone(), prompt_tokens: Some(10), completion_tokens: Some(5) })
        }
    }

    fn gateway() -> Gateway {
        let g = Gateway::new().with_request_log();
        g.register(Arc::new(Echo { id: "cloud", locality: Locality::Cloud }));
        g.register(Arc::new(Echo { id: "local", locality: Locality::Local }));
        g
    }

    fn cfg(bindings: &[(ModelRole, &str)], policy: PrivacyPolicy) -> SystemConfig {
        SystemConfig {
            model_bindings: bindings.iter().map(|(r, b)| (*r, b.to_string())).collect(),
            privacy_policy: policy,
            ..SystemConfig::default()
        }
    }

    fn judge(prompt: &str, locality: LocalityRequirement) -> ModelRequest {
        let mut r = ModelRequest::new(ModelRole::SufficiencyJudge, "", prompt, locality);
        r.session_id = "s1".into();
        r
    }

    #[test]
    fn clean_goes_to_bound_backend() {
        let g = gateway();
        let c = cfg(&[(ModelRole::SufficiencyJudge, "cloud")], PrivacyPolicy::LocalOnly);
        let r = g.complete(judge("I bike", LocalityRequirement::CloudEligible), &c).unwrap();
        assert_eq!(r.backend_id, "cloud");
    }

    #[test]
    fn local_only_without_local_backend_fails() {
        let g = gateway();
        let c = cfg(&[(ModelRole::SufficiencyJudge, "cloud")], PrivacyPolicy::LocalOnly);
        let err = g.complete(judge("x", LocalityRequirement::LocalOnly), &c).unwrap_err();
        assert_eq!(err, GatewayError::LocalityViolation("cloud".into()));
    }

    #[test]
    fn pii_routes_local_or_redacts() {
        let g = gateway();
        let local = cfg(
            &[(ModelRole::SufficiencyJudge, "cloud"), (ModelRole::PiiScreener, "local")],
            PrivacyPolicy::LocalOnly,
        );
        let prompt = "write to jane@example.org";
        let r = g.complete(judge(prompt, LocalityRequirement::CloudEligible), &local);
        // The screener echo names no category, so only the rule pass flags the email.
        assert_eq!(r.unwrap().backend_id, "local");

        let redact = cfg(&[(ModelRole::SufficiencyJudge, "cloud")], PrivacyPolicy::RedactThenCloud);
        let r = g.complete(judge(prompt, LocalityRequirement::CloudEligible), &redact).unwrap();
        assert_eq!(r.backend_id, "cloud");
        assert_eq!(r.text, "write to ⟨EMAIL_1⟩");
        for d in g.dispatch_log().iter().filter(|d| d.locality == Locality::Cloud) {
            assert!(!d.user_prompt.contains("jane@example.org"));
        }
    }

    #[test]
    fn ledger_and_call_index() {
        let g = gateway();
        let c = cfg(&[(ModelRole::SufficiencyJudge, "local")], PrivacyPolicy::LocalOnly);
        g.open_session("s1");
        assert_eq!(g.report_tokens("s1").unwrap().total, Totals::default());
        for _ in 0..3 {
            g.complete(judge("x", LocalityRequirement::CloudEligible), &c).unwrap();
        }
        let l = g.report_tokens("s1").unwrap();
        assert_eq!((l.total.prompt_tokens, l.total.completion_tokens), (30, 15));
        assert!(matches!(g.report_tokens("nope"), Err(GatewayError::UnknownSession(_))));
    }
}
