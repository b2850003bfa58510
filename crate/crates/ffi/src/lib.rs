//! C ABI over the interview engine.
//!
//! Agent messages are JSON objects in the same shape the HTTP API returns.
//! Every function returns an [`IlcStatus`]. On failure, [`ilc_last_error`] describes the
//! most recent error on the calling thread. Strings handed out by this library are
//! NUL-terminated UTF-8 and must be released with [`ilc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::{Arc, Mutex, TryLockError};

use interlocutor::engine::{Engine, EngineError, Input, SessionState};
use interlocutor::flow::{parse_flow, validate_flow, ConfigOverrides, FlowDefinition};
use interlocutor::gateway::{Fixture, Gateway, Locality, RuleBackend, ScriptedBackend};
use interlocutor::replay::{render_transcript, replay, ReplayOptions};
use interlocutor::service::AgentMessagePayload;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IlcStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    ValidationError = 4,
    InvalidInput = 5,
    UnknownLanguage = 6,
    SessionNotActive = 7,
    Busy = 8,
    Internal = 9,
}

/// A parsed flow definition.
pub struct IlcFlow(Arc<FlowDefinition>);

/// An engine plus its model gateway.
pub struct IlcEngine(Arc<Engine>);

/// One participant session bound to an engine and a flow.
pub struct IlcSession {
    engine: Arc<Engine>,
    flow: Arc<FlowDefinition>,
    state: Mutex<SessionState>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Fail(IlcStatus, String);

impl From<EngineError> for Fail {
    fn from(e: EngineError) -> Self {
        let status = match e {
            EngineError::InvalidLanguage(_) => IlcStatus::UnknownLanguage,
            EngineError::SessionNotActive => IlcStatus::SessionNotActive,
            EngineError::Busy => IlcStatus::Busy,
            EngineError::InvalidInput(_) | EngineError::FlowMismatch(_) => IlcStatus::InvalidInput,
            _ => IlcStatus::Internal,
        };
        Fail(status, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IlcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            IlcStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            IlcStatus::Internal
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(IlcStatus::NullArgument, format!("`{what}` is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(IlcStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn opt_text<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, what).map(Some)
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(IlcStatus::NullArgument, format!("`{what}` is null")))
}

unsafe fn out<T>(p: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail(IlcStatus::NullArgument, format!("`{what}` is null")));
    }
    p.write(value);
    Ok(())
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

fn json<T: serde::Serialize>(value: &T) -> Result<*mut c_char, Fail> {
    serde_json::to_string(value).map(c_string).map_err(|e| Fail(IlcStatus::Internal, e.to_string()))
}

/// Message describing the last failure on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn ilc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ilc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a flow document. Validation findings do not fail parsing; see [`ilc_flow_validate`].
///
/// # Safety
/// `json` must be a NUL-terminated string; `out_flow` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ilc_flow_parse(json: *const c_char, out_flow: *mut *mut IlcFlow) -> IlcStatus {
    guard(|| {
        let src = text(json, "json")?;
        let flow = parse_flow(src).map_err(|e| Fail(IlcStatus::ParseError, e.to_string()))?;
        out(out_flow, Box::into_raw(Box::new(IlcFlow(Arc::new(flow)))), "out_flow")
    })
}

/// Writes the findings as a JSON array; returns `ValidationError` when there are any.
///
/// # Safety
/// `flow` must be a live handle; `out_findings` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ilc_flow_validate(flow: *const IlcFlow, out_findings: *mut *mut c_char) -> IlcStatus {
    guard(|| {
        let flow = handle(flow, "flow")?;
        let report = validate_flow(&flow.0);
        out(out_findings, json(&report.findings)?, "out_findings")?;
        if report.is_clean() {
            Ok(())
        } else {
            Err(Fail(IlcStatus::ValidationError, format!("{} finding(s)", report.findings.len())))
        }
    })
}

/// # Safety
/// `flow` must be null or a handle from [`ilc_flow_parse`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ilc_flow_free(flow: *mut IlcFlow) {
    if !flow.is_null() {
        drop(Box::from_raw(flow));
    }
}

/// Creates an engine with a local rule-based backend registered as `rules`.
///
/// # Safety
/// `out_engine` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ilc_engine_new(out_engine: *mut *mut IlcEngine) -> IlcStatus {
    guard(|| {
        let gw = Gateway::new();
        gw.register(Arc::new(RuleBackend::new("rules")));
        out(out_engine, Box::into_raw(Box::new(IlcEngine(Arc::new(Engine::new(Arc::new(gw)))))), "out_engine")
    })
}

/// Registers a scripted backend answering from a fixture JSON array.
///
/// # Safety
/// `engine` must be a live handle; `id` and `fixture_json` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ilc_engine_add_scripted(
    engine: *const IlcEngine,
    id: *const c_char,
    local: bool,
    fixture_json: *const c_char,
) -> IlcStatus {
    guard(|| {
        let engine = handle(engine, "engine")?;
        let id = text(id, "id")?;
        let fx = Fixture::parse(text(fixture_json, "fixture_json")?).map_err(|e| Fail(IlcStatus::ParseError, e))?;
        let locality = if local { Locality::Local } else { Locality::Cloud };
        engine.0.gateway().register(Arc::new(ScriptedBackend::new(id, locality, fx.backend, false)));
        Ok(())
    })
}

/// # Safety
/// `engine` must be null or a handle from [`ilc_engine_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ilc_engine_free(engine: *mut IlcEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Starts a session and writes the first agent message as JSON.
///
/// # Safety
/// `engine` and `flow` must be live handles; `language` may be null for the flow default.
#[no_mangle]
pub unsafe extern "C" fn ilc_session_start(
    engine: *const IlcEngine,
    flow: *const IlcFlow,
    language: *const c_char,
    out_session: *mut *mut IlcSession,
    out_message: *mut *mut c_char,
) -> IlcStatus {
    guard(|| {
        let engine = handle(engine, "engine")?;
        let flow = handle(flow, "flow")?;
        let language = opt_text(language, "language")?;
        if out_session.is_null() || out_message.is_null() {
            return Err(Fail(IlcStatus::NullArgument, "output pointer is null".into()));
        }
        let (state, action) = engine.0.start_session(&flow.0, &ConfigOverrides::default(), language)?;
        let message = json(&AgentMessagePayload::from_action(&action, &state.language, ""))?;
        let session = IlcSession { engine: engine.0.clone(), flow: flow.0.clone(), state: Mutex::new(state) };
        out(out_session, Box::into_raw(Box::new(session)), "out_session")?;
        out(out_message, message, "out_message")
    })
}

/// Rebuilds a session from JSON produced by [`ilc_session_state`].
///
/// # Safety
/// `engine` and `flow` must be live handles; `state_json` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ilc_session_restore(
    engine: *const IlcEngine,
    flow: *const IlcFlow,
    state_json: *const c_char,
    out_session: *mut *mut IlcSession,
) -> IlcStatus {
    guard(|| {
        let engine = handle(engine, "engine")?;
        let flow = handle(flow, "flow")?;
        let state: SessionState =
            serde_json::from_str(text(state_json, "state_json")?).map_err(|e| Fail(IlcStatus::ParseError, e.to_string()))?;
        if state.flow_id != flow.0.id {
            return Err(Fail(IlcStatus::InvalidInput, format!("session belongs to flow `{}`", state.flow_id)));
        }
        engine.0.gateway().open_session(&state.session_id);
        let session = IlcSession { engine: engine.0.clone(), flow: flow.0.clone(), state: Mutex::new(state) };
        out(out_session, Box::into_raw(Box::new(session)), "out_session")
    })
}

unsafe fn send(session: *const IlcSession, input: Input, out_message: *mut *mut c_char) -> Result<(), Fail> {
    let session = handle(session, "session")?;
    if out_message.is_null() {
        return Err(Fail(IlcStatus::NullArgument, "`out_message` is null".into()));
    }
    let mut st = match session.state.try_lock() {
        Ok(st) => st,
        Err(TryLockError::WouldBlock) => return Err(EngineError::Busy.into()),
        Err(TryLockError::Poisoned(_)) => return Err(Fail(IlcStatus::Internal, "session lock poisoned".into())),
    };
    let action = session.engine.ingest(&session.flow, &mut st, input)?;
    out(out_message, json(&AgentMessagePayload::from_action(&action, &st.language, ""))?, "out_message")
}

/// Sends typed text and writes the agent's reply as JSON.
///
/// # Safety
/// `session` must be a live handle; `text` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ilc_session_send_text(
    session: *const IlcSession,
    message: *const c_char,
    out_message: *mut *mut c_char,
) -> IlcStatus {
    guard(|| send(session, Input::Text(text(message, "message")?.to_string()), out_message))
}

/// Presses an option button (including `continue` and `add`) and writes the reply as JSON.
///
/// # Safety
/// `session` must be a live handle; `option_id` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ilc_session_choose(
    session: *const IlcSession,
    option_id: *const c_char,
    out_message: *mut *mut c_char,
) -> IlcStatus {
    guard(|| send(session, Input::Choice(text(option_id, "option_id")?.to_string()), out_message))
}

/// Whether the session still accepts input. False for a null handle.
///
/// # Safety
/// `session` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ilc_session_is_active(session: *const IlcSession) -> bool {
    session.as_ref().is_some_and(|s| s.state.lock().map(|st| st.is_active()).unwrap_or(false))
}

/// Serializes the full session state for later [`ilc_session_restore`].
///
/// # Safety
/// `session` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ilc_session_state(session: *const IlcSession, out_json: *mut *mut c_char) -> IlcStatus {
    guard(|| {
        let session = handle(session, "session")?;
        let st = session.state.lock().map_err(|_| Fail(IlcStatus::Internal, "session lock poisoned".into()))?;
        out(out_json, json(&*st)?, "out_json")
    })
}

/// Writes the participant-visible transcript as `AGENT:`/`PARTICIPANT:` lines.
///
/// # Safety
/// `session` must be a live handle; `out_text` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ilc_session_transcript(session: *const IlcSession, out_text: *mut *mut c_char) -> IlcStatus {
    guard(|| {
        let session = handle(session, "session")?;
        let st = session.state.lock().map_err(|_| Fail(IlcStatus::Internal, "session lock poisoned".into()))?;
        out(out_text, c_string(render_transcript(&st)), "out_text")
    })
}

/// Writes the session's token ledger as JSON.
///
/// # Safety
/// `session` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ilc_session_tokens(session: *const IlcSession, out_json: *mut *mut c_char) -> IlcStatus {
    guard(|| {
        let session = handle(session, "session")?;
        let id = session.state.lock().map_err(|_| Fail(IlcStatus::Internal, "session lock poisoned".into()))?.session_id.clone();
        let ledger = session.engine.gateway().report_tokens(&id).unwrap_or_default();
        out(out_json, json(&ledger)?, "out_json")
    })
}

/// # Safety
/// `session` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ilc_session_free(session: *mut IlcSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Replays a scripted session end to end and writes its transcript.
///
/// # Safety
/// `flow_json` and `script_json` must be NUL-terminated strings; `out_text` writable.
#[no_mangle]
pub unsafe extern "C" fn ilc_replay(
    flow_json: *const c_char,
    script_json: *const c_char,
    seed: u64,
    out_text: *mut *mut c_char,
) -> IlcStatus {
    guard(|| {
        let flow = parse_flow(text(flow_json, "flow_json")?).map_err(|e| Fail(IlcStatus::ParseError, e.to_string()))?;
        let fx = Fixture::parse(text(script_json, "script_json")?).map_err(|e| Fail(IlcStatus::ParseError, e))?;
        let result = replay(&flow, &fx, &ReplayOptions::default().seed(seed)).map_err(|e| Fail(IlcStatus::Internal, e.to_string()))?;
        if let Some(miss) = result.misses.first() {
            return Err(Fail(IlcStatus::InvalidInput, format!("fixture miss: {miss}")));
        }
        out(out_text, c_string(render_transcript(&result.state)), "out_text")
    })
}
