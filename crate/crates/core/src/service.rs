//! HTTP interface for live sessions, flow deployment and exports.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use axum::extract::{MatchedPath, Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::engine::{Engine, EngineAction, EngineError, EntryKind, Input, OptionView, SessionState};
use crate::flow::{parse_flow, validate_flow, ConfigOverrides, FlowDefinition, ValidationReport};
use crate::gateway::{Fixture, Gateway, HttpBackend, HttpConfig, Locality, RuleBackend, ScriptedBackend};
use crate::knowledge::KnowledgeStore;
use crate::postprocess::QualityRule;
use crate::replay::SCRIPTED_ID;
use crate::store::{self, FileStore, MemoryStore, Resume, SessionStore, StoreError};

/// Backend id of the built-in heuristic backend.
pub const RULES_ID: &str = "rules";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Settings read from `INTERLOCUTOR_*` variables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ServiceConfig {
    pub listen: String,
    pub admin_token: Option<String>,
    /// Session store directory; in-memory when unset.
    pub store: Option<PathBuf>,
    /// Days to keep session records after their last update; kept forever when unset.
    pub retention_days: Option<u64>,
    /// Directory of flow documents loaded at startup.
    pub flows: Option<PathBuf>,
    /// Base directory for knowledge-base sources; defaults to the flows directory.
    pub kb_dir: Option<PathBuf>,
    /// Prefix for relative asset paths in payloads.
    pub asset_base: String,
    /// Fixture answering every model role, for demos and end-to-end tests.
    pub script: Option<PathBuf>,
    pub llm: Option<HttpConfig>,
    pub local: Option<HttpConfig>,
}

impl ServiceConfig {
    pub fn from_env() -> Self {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Self {
        let path = |k: &str| get(k).filter(|v| !v.is_empty()).map(PathBuf::from);
        Self {
            listen: get("INTERLOCUTOR_LISTEN").unwrap_or_else(|| "127.0.0.1:8080".into()),
            admin_token: get("INTERLOCUTOR_ADMIN_TOKEN").filter(|t| !t.is_empty()),
            store: path("INTERLOCUTOR_STORE"),
            retention_days: get("INTERLOCUTOR_RETENTION_DAYS").and_then(|v| v.parse().ok()),
            flows: path("INTERLOCUTOR_FLOWS"),
            kb_dir: path("INTERLOCUTOR_KB_DIR"),
            asset_base: get("INTERLOCUTOR_ASSET_BASE").unwrap_or_default(),
            script: path("INTERLOCUTOR_SCRIPT"),
            llm: HttpConfig::from_lookup("INTERLOCUTOR_LLM", "llm", Locality::Cloud, &get),
            local: HttpConfig::from_lookup("INTERLOCUTOR_LOCAL", "local", Locality::Local, &get),
        }
    }
}

/// Shared handler state. Sessions themselves live only in the store.
pub struct AppState {
    engine: Engine,
    store: Arc<dyn SessionStore>,
    flows: RwLock<BTreeMap<String, Arc<FlowDefinition>>>,
    admin_token: Option<String>,
    asset_base: String,
    kb_base: Option<PathBuf>,
    busy: Mutex<HashSet<String>>,
    access_log: Mutex<Vec<String>>,
}

impl AppState {
    pub fn new(engine: Engine, store: Arc<dyn SessionStore>, admin_token: Option<String>) -> Self {
        Self {
            engine,
            store,
            flows: RwLock::default(),
            admin_token,
            asset_base: String::new(),
            kb_base: None,
            busy: Mutex::default(),
            access_log: Mutex::default(),
        }
    }

    pub fn with_asset_base(mut self, base: impl Into<String>) -> Self {
        self.asset_base = base.into();
        self
    }

    pub fn with_kb_base(mut self, base: impl Into<PathBuf>) -> Self {
        self.kb_base = Some(base.into());
        self
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn store(&self) -> &Arc<dyn SessionStore> {
        &self.store
    }

    /// Makes a flow available to new sessions, loading its knowledge-base sources.
    pub fn add_flow(&self, flow: FlowDefinition) -> Result<(), ServiceError> {
        if let Some(base) = &self.kb_base {
            self.engine
                .knowledge()
                .load_flow_sources(&flow, base)
                .map_err(|e| ServiceError::Config(format!("flow `{}`: {e}", flow.id)))?;
        }
        self.flows.write().unwrap().insert(flow.id.clone(), Arc::new(flow));
        Ok(())
    }

    pub fn flow(&self, id: &str) -> Option<Arc<FlowDefinition>> {
        self.flows.read().unwrap().get(id).cloned()
    }

    /// One line per request: method, route template, status and latency.
    pub fn access_log(&self) -> Vec<String> {
        self.access_log.lock().unwrap().clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Question,
    Clarification,
    Paraphrase,
    Apology,
    Completion,
}

/// What the chat client renders for one agent turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentMessagePayload {
    pub kind: PayloadKind,
    pub text: String,
    pub options: Vec<OptionView>,
    pub assets: Vec<String>,
    pub allow_voluntary_add: bool,
    pub language: String,
    /// Agent messages shown before the question, in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub preface: Vec<String>,
}

impl AgentMessagePayload {
    pub fn from_action(action: &EngineAction, language: &str, asset_base: &str) -> Self {
        let mut p = Self {
            kind: PayloadKind::Question,
            text: action.text().to_string(),
            options: Vec::new(),
            assets: Vec::new(),
            allow_voluntary_add: false,
            language: language.to_string(),
            preface: Vec::new(),
        };
        match action {
            EngineAction::AskQuestion { preface, options, assets, .. } => {
                p.preface = preface.clone();
                p.options = options.clone();
                p.assets = assets.iter().map(|a| asset_url(asset_base, a)).collect();
            }
            EngineAction::AskClarification { .. } => p.kind = PayloadKind::Clarification,
            EngineAction::Paraphrase { offer_voluntary_add, .. } => {
                p.kind = PayloadKind::Paraphrase;
                p.allow_voluntary_add = *offer_voluntary_add;
            }
            EngineAction::ApologizeAndRestate { text, question } => {
                p.kind = PayloadKind::Apology;
                p.text = format!("{text}\n{question}");
            }
            EngineAction::Complete { .. } => p.kind = PayloadKind::Completion,
        }
        p
    }
}

fn asset_url(base: &str, asset: &str) -> String {
    if base.is_empty() || asset.contains("://") {
        return asset.to_string();
    }
    format!("{}/{}", base.trim_end_matches('/'), asset.trim_start_matches('/'))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartRequest {
    pub flow_id: String,
    #[serde(default)]
    pub language: Option<String>,
    #[serde(default)]
    pub resumption_token: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionReply {
    pub token: String,
    pub resumed: bool,
    pub message: AgentMessagePayload,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MessageRequest {
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub option_id: Option<String>,
    /// Input channel reported by the client, e.g. `voice`; the text is used as typed.
    #[serde(default)]
    pub modality: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MessageReply {
    pub token: String,
    pub message: AgentMessagePayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptItem {
    pub role: String,
    pub kind: EntryKind,
    pub node: String,
    pub text: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptView {
    pub token: String,
    pub status: crate::engine::SessionStatus,
    pub language: String,
    pub entries: Vec<TranscriptItem>,
    /// The message awaiting a reply, when the session is still active.
    pub pending: Option<AgentMessagePayload>,
}

/// Error body: `{code, message, retriable}` plus optional details.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    details: Option<serde_json::Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), details: None }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string())
    }

    fn not_found(what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NOT_FOUND", format!("unknown {what}"))
    }

    fn busy() -> Self {
        Self::new(StatusCode::CONFLICT, "BUSY", "another message for this session is being processed")
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        Self::internal(e)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let (status, code) = match &e {
            EngineError::Busy => (StatusCode::CONFLICT, "BUSY"),
            EngineError::SessionNotActive => (StatusCode::GONE, "SESSION_ENDED"),
            EngineError::InvalidLanguage(_) => (StatusCode::BAD_REQUEST, "UNKNOWN_LANGUAGE"),
            EngineError::InvalidInput(_) => (StatusCode::BAD_REQUEST, "INVALID_INPUT"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "ENGINE"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({
            "code": self.code,
            "message": self.message,
            "retriable": self.status == StatusCode::CONFLICT,
        });
        if let Some(d) = self.details {
            body["details"] = d;
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

struct TokenGuard<'a> {
    set: &'a Mutex<HashSet<String>>,
    token: String,
}

impl Drop for TokenGuard<'_> {
    fn drop(&mut self) {
        self.set.lock().unwrap().remove(&self.token);
    }
}

impl AppState {
    fn lock_token(&self, token: &str) -> ApiResult<TokenGuard<'_>> {
        if !self.busy.lock().unwrap().insert(token.to_string()) {
            return Err(ApiError::busy());
        }
        Ok(TokenGuard { set: &self.busy, token: token.to_string() })
    }

    fn payload(&self, action: &EngineAction, st: &SessionState) -> AgentMessagePayload {
        AgentMessagePayload::from_action(action, &st.language, &self.asset_base)
    }

    fn persist(&self, st: &SessionState) -> ApiResult<String> {
        let gateway = self.engine.gateway();
        let ledger = gateway.report_tokens(&st.session_id).unwrap_or_default();
        let token = self.store.save(st, &ledger)?;
        gateway.close_session(&st.session_id);
        Ok(token)
    }

    fn start(&self, req: StartRequest) -> ApiResult<SessionReply> {
        let flow = self.flow(&req.flow_id).ok_or_else(|| ApiError::not_found("flow"))?;
        if let Some(lang) = &req.language {
            if !flow.has_language(lang) {
                return Err(EngineError::InvalidLanguage(lang.clone()).into());
            }
        }
        if let Some(token) = &req.resumption_token {
            if let Resume::Active(record) = self.store.resume(token) {
                if record.flow_id == flow.id {
                    let st = record.state;
                    if let Some(action) = &st.pending_action {
                        return Ok(SessionReply { token: record.token, resumed: true, message: self.payload(action, &st) });
                    }
                }
            }
        }
        let (st, action) = self.engine.start_session(&flow, &ConfigOverrides::default(), req.language.as_deref())?;
        let token = self.persist(&st)?;
        Ok(SessionReply { token, resumed: false, message: self.payload(&action, &st) })
    }

    fn message(&self, token: String, req: MessageRequest) -> ApiResult<MessageReply> {
        let input = match (req.text, req.option_id) {
            (Some(t), None) => Input::Text(t),
            (None, Some(id)) => Input::Choice(id),
            _ => {
                return Err(ApiError::new(StatusCode::BAD_REQUEST, "INVALID_INPUT", "send exactly one of text or option_id"))
            }
        };
        let _guard = self.lock_token(&token)?;
        let record = self.store.load(&token)?.ok_or_else(|| ApiError::not_found("session"))?;
        let mut st = record.state;
        if !st.is_active() {
            return Err(EngineError::SessionNotActive.into());
        }
        let flow = self.flow(&st.flow_id).ok_or_else(|| ApiError::not_found("flow"))?;
        self.engine.gateway().restore_session(&st.session_id, record.ledger);
        let result = self.engine.ingest(&flow, &mut st, input);
        let action = match result {
            Ok(a) => a,
            Err(e) => {
                self.engine.gateway().close_session(&st.session_id);
                return Err(e.into());
            }
        };
        let token = self.persist(&st)?;
        Ok(MessageReply { token, message: self.payload(&action, &st) })
    }

    fn transcript(&self, token: &str) -> ApiResult<TranscriptView> {
        let record = self.store.load(token)?.ok_or_else(|| ApiError::not_found("session"))?;
        let st = record.state;
        let entries = st
            .transcript
            .iter()
            .filter(|e| e.kind.is_participant_visible())
            .map(|e| TranscriptItem {
                role: if e.kind.is_participant() { "participant" } else { "agent" }.into(),
                kind: e.kind,
                node: e.node.clone(),
                text: e.text.clone(),
                timestamp: e.timestamp,
            })
            .collect();
        let pending = if st.is_active() { st.pending_action.as_ref().map(|a| self.payload(a, &st)) } else { None };
        Ok(TranscriptView { token: record.token, status: st.status, language: st.language.clone(), entries, pending })
    }

    fn check_admin(&self, headers: &HeaderMap) -> ApiResult<()> {
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        match (&self.admin_token, given) {
            (Some(expected), Some(g)) if g == expected => Ok(()),
            _ => Err(ApiError::new(StatusCode::UNAUTHORIZED, "UNAUTHORIZED", "admin credential required")),
        }
    }

    fn deploy(&self, body: &str) -> ApiResult<serde_json::Value> {
        let flow = parse_flow(body).map_err(|e| {
            let findings: Vec<serde_json::Value> =
                e.0.iter().map(|f| json!({"code": "PARSE_ERROR", "severity": "error", "message": f.to_string()})).collect();
            ApiError { details: Some(json!({ "findings": findings })), ..invalid_flow("flow document does not parse") }
        })?;
        let report: ValidationReport = validate_flow(&flow);
        if !report.is_clean() {
            return Err(ApiError {
                details: Some(json!({ "findings": report.findings })),
                ..invalid_flow(format!("flow `{}` has {} finding(s)", flow.id, report.findings.len()))
            });
        }
        self.store.put_flow(&flow.id, body)?;
        let reply = json!({ "flow_id": flow.id, "version": flow.version });
        self.add_flow(flow).map_err(ApiError::internal)?;
        Ok(reply)
    }

    fn export(&self, format: &str) -> ApiResult<(String, &'static str)> {
        let records = self.store.records()?;
        let flows: Vec<FlowDefinition> = self.flows.read().unwrap().values().map(|f| (**f).clone()).collect();
        let rows = store::export_anonymized(&records, &flows, &self.store.salt(), &QualityRule::default());
        match format {
            "csv" => Ok((store::export_csv(&rows)?, "text/csv; charset=utf-8")),
            "jsonl" => Ok((store::export_jsonl(&rows)?, "application/x-ndjson")),
            other => Err(ApiError::new(StatusCode::BAD_REQUEST, "INVALID_FORMAT", format!("unknown format `{other}`"))),
        }
    }
}

fn invalid_flow(message: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "INVALID_FLOW", message)
}

fn json_body<T: for<'de> Deserialize<'de>>(body: &str) -> ApiResult<T> {
    serde_json::from_str(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BAD_REQUEST", e.to_string()))
}

async fn start_session(State(app): State<Arc<AppState>>, body: String) -> ApiResult<Json<SessionReply>> {
    let req: StartRequest = json_body(&body)?;
    blocking(move || app.start(req)).await.map(Json)
}

async fn post_message(
    State(app): State<Arc<AppState>>,
    UrlPath(token): UrlPath<String>,
    body: String,
) -> ApiResult<Json<MessageReply>> {
    let req: MessageRequest = json_body(&body)?;
    blocking(move || app.message(token, req)).await.map(Json)
}

async fn get_transcript(State(app): State<Arc<AppState>>, UrlPath(token): UrlPath<String>) -> ApiResult<Json<TranscriptView>> {
    blocking(move || app.transcript(&token)).await.map(Json)
}

async fn put_flow(State(app): State<Arc<AppState>>, headers: HeaderMap, body: String) -> ApiResult<Json<serde_json::Value>> {
    app.check_admin(&headers)?;
    blocking(move || app.deploy(&body)).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    #[serde(default = "default_format")]
    format: String,
}

fn default_format() -> String {
    "csv".into()
}

async fn get_export(
    State(app): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(q): Query<ExportQuery>,
) -> ApiResult<Response> {
    app.check_admin(&headers)?;
    let (body, content_type) = blocking(move || app.export(&q.format)).await?;
    Ok(([(header::CONTENT_TYPE, content_type)], body).into_response())
}

async fn get_tokens(
    State(app): State<Arc<AppState>>,
    headers: HeaderMap,
    UrlPath(token): UrlPath<String>,
) -> ApiResult<Json<serde_json::Value>> {
    app.check_admin(&headers)?;
    let record = app.store.load(&token)?.ok_or_else(|| ApiError::not_found("session"))?;
    let ledger = record.ledger;
    let totals = ledger.per_turn().values().fold((0u64, 0u64), |acc, t| (acc.0 + t.prompt_tokens, acc.1 + t.completion_tokens));
    Ok(Json(json!({
        "samples": ledger.samples,
        "prompt_tokens": totals.0,
        "completion_tokens": totals.1,
    })))
}

async fn access_log(State(app): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let route = req.extensions().get::<MatchedPath>().map(|p| p.as_str().to_string()).unwrap_or_else(|| "<unmatched>".into());
    let method = req.method().clone();
    let started = Instant::now();
    let resp = next.run(req).await;
    let line = format!("{method} {route} {} {}ms", resp.status().as_u16(), started.elapsed().as_millis());
    tracing::info!(target: "interlocutor::access", "{line}");
    app.access_log.lock().unwrap().push(line);
    resp
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(start_session))
        .route("/sessions/{token}/messages", post(post_message))
        .route("/sessions/{token}/transcript", get(get_transcript))
        .route("/admin/flows", put(put_flow))
        .route("/admin/export", get(get_export))
        .route("/admin/sessions/{token}/tokens", get(get_tokens))
        .layer(middleware::from_fn_with_state(app.clone(), access_log))
        .with_state(app)
}

fn read_flow(path: &Path) -> Result<FlowDefinition, ServiceError> {
    let text = std::fs::read_to_string(path)?;
    parse_flow(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))
}

/// Flow documents (`*.json` not ending in `.script.json`) in a directory, sorted by name.
pub fn flow_files(dir: &Path) -> Result<Vec<PathBuf>, ServiceError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".json") && !name.contains(".script.") && !name.contains(".plan.")
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Wires backends, store and flows from a configuration.
pub fn build(cfg: &ServiceConfig) -> Result<Arc<AppState>, ServiceError> {
    let mut flows = Vec::new();
    if let Some(dir) = &cfg.flows {
        for path in flow_files(dir)? {
            match read_flow(&path) {
                Ok(f) => flows.push(f),
                Err(e) => tracing::warn!("skipping {}: {e}", path.display()),
            }
        }
    }
    let store: Arc<dyn SessionStore> = match &cfg.store {
        Some(root) => Arc::new(FileStore::open(root)?),
        None => Arc::new(MemoryStore::new()),
    };
    if let Some(days) = cfg.retention_days {
        let purged = store::purge_older_than(store.as_ref(), days)?;
        tracing::info!("retention: removed {purged} record(s) older than {days} day(s)");
    }
    for doc in store.flows()? {
        match parse_flow(&doc) {
            Ok(f) => {
                flows.retain(|g: &FlowDefinition| g.id != f.id);
                flows.push(f);
            }
            Err(e) => tracing::warn!("skipping stored flow: {e}"),
        }
    }

    let gateway = Gateway::new();
    gateway.register(Arc::new(RuleBackend::new(RULES_ID)));
    for http in [&cfg.llm, &cfg.local].into_iter().flatten() {
        let backend = HttpBackend::new(http.clone()).map_err(|e| ServiceError::Config(e.to_string()))?;
        gateway.register(Arc::new(backend));
    }
    if let Some(path) = &cfg.script {
        let fixture = Fixture::parse(&std::fs::read_to_string(path)?)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let scripted = ScriptedBackend::new(SCRIPTED_ID, Locality::Local, fixture.backend, false);
        let mut ids: Vec<String> = flows.iter().flat_map(|f| f.config.model_bindings.values().cloned()).collect();
        ids.extend([SCRIPTED_ID.to_string(), RULES_ID.to_string()]);
        ids.sort();
        ids.dedup();
        for id in ids {
            gateway.register(Arc::new(scripted.renamed(id)));
        }
    }
    let engine = Engine::new(Arc::new(gateway)).with_knowledge(Arc::new(KnowledgeStore::new()));
    let mut app = AppState::new(engine, store, cfg.admin_token.clone()).with_asset_base(cfg.asset_base.clone());
    if let Some(base) = cfg.kb_dir.as_ref().or(cfg.flows.as_ref()) {
        app = app.with_kb_base(base);
    }
    for flow in flows {
        app.add_flow(flow)?;
    }
    Ok(Arc::new(app))
}

/// Binds the configured address and serves until interrupted.
pub async fn serve(cfg: ServiceConfig) -> Result<(), ServiceError> {
    let app = tokio::task::spawn_blocking({
        let cfg = cfg.clone();
        move || build(&cfg)
    })
    .await
    .map_err(|e| ServiceError::Config(e.to_string()))??;
    if let Some(days) = cfg.retention_days {
        let store = app.store().clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(std::time::Duration::from_secs(3600));
            tick.tick().await;
            loop {
                tick.tick().await;
                let store = store.clone();
                if let Ok(Err(e)) = tokio::task::spawn_blocking(move || store::purge_older_than(store.as_ref(), days)).await {
                    tracing::warn!("retention sweep failed: {e}");
                }
            }
        });
    }
    let listener = tokio::net::TcpListener::bind(&cfg.listen).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
