//! Session persistence, resumption by opaque token, and anonymized export.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{SessionState, SessionStatus};
use crate::flow::{FlowDefinition, Value};
use crate::gateway::TokenLedger;
use crate::postprocess::{self, QualityRule};
use crate::privacy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub token: String,
    pub state: SessionState,
    pub ledger: TokenLedger,
    pub flow_id: String,
    pub flow_version: String,
    pub created_at: u64,
    pub updated_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Resume {
    Active(Box<SessionRecord>),
    /// No active session for the token; start a new one.
    New,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage failure: {0}")]
    Storage(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Storage(e.to_string())
    }
}

impl From<serde_json::Error> for StoreError {
    fn from(e: serde_json::Error) -> Self {
        StoreError::Storage(e.to_string())
    }
}

fn now_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

pub fn new_token() -> String {
    format!("{:032x}", rand::random::<u128>())
}

/// Applies a retention window in days; returns how many records were deleted.
pub fn purge_older_than(store: &dyn SessionStore, days: u64) -> Result<usize, StoreError> {
    store.purge(now_millis().saturating_sub(days.saturating_mul(86_400_000)))
}

pub trait SessionStore: Send + Sync {
    /// Creates or updates the record for `state.session_id`; returns its token.
    fn save(&self, state: &SessionState, ledger: &TokenLedger) -> Result<String, StoreError>;
    fn load(&self, token: &str) -> Result<Option<SessionRecord>, StoreError>;
    /// Consistent snapshot of every record.
    fn records(&self) -> Result<Vec<SessionRecord>, StoreError>;
    /// Secret mixed into participant pseudonyms.
    fn salt(&self) -> String;
    /// Persists a deployed flow document.
    fn put_flow(&self, id: &str, document: &str) -> Result<(), StoreError>;
    fn flows(&self) -> Result<Vec<String>, StoreError>;
    /// Deletes records last updated before `cutoff` (milliseconds since the epoch); returns how many.
    fn purge(&self, cutoff: u64) -> Result<usize, StoreError>;

    fn resume(&self, token: &str) -> Resume {
        match self.load(token) {
            Ok(Some(r)) if r.state.status == SessionStatus::Active => Resume::Active(Box::new(r)),
            _ => Resume::New,
        }
    }
}

#[derive(Debug, Default)]
struct Index {
    by_token: HashMap<String, SessionRecord>,
    by_session: HashMap<String, String>,
}

impl Index {
    fn upsert(&mut self, state: &SessionState, ledger: &TokenLedger) -> SessionRecord {
        let now = now_millis();
        let token = self.by_session.get(&state.session_id).cloned().unwrap_or_else(new_token);
        let created_at = self.by_token.get(&token).map_or(now, |r| r.created_at);
        let record = SessionRecord {
            token: token.clone(),
            state: state.clone(),
            ledger: ledger.clone(),
            flow_id: state.flow_id.clone(),
            flow_version: state.flow_version.clone(),
            created_at,
            updated_at: now,
        };
        self.by_session.insert(state.session_id.clone(), token.clone());
        self.by_token.insert(token, record.clone());
        record
    }

    fn remove_before(&mut self, cutoff: u64) -> Vec<String> {
        let stale: Vec<String> = self.by_token.values().filter(|r| r.updated_at < cutoff).map(|r| r.token.clone()).collect();
        for token in &stale {
            if let Some(r) = self.by_token.remove(token) {
                self.by_session.remove(&r.state.session_id);
            }
        }
        stale
    }

    fn sorted(&self) -> Vec<SessionRecord> {
        let mut v: Vec<SessionRecord> = self.by_token.values().cloned().collect();
        v.sort_by(|a, b| (a.created_at, &a.token).cmp(&(b.created_at, &b.token)));
        v
    }
}

#[derive(Debug)]
pub struct MemoryStore {
    index: Mutex<Index>,
    flows: Mutex<BTreeMap<String, String>>,
    salt: String,
}

impl Default for MemoryStore {
    fn default() -> Self {
        Self::new()
    }
}

impl MemoryStore {
    pub fn new() -> Self {
        Self { index: Mutex::default(), flows: Mutex::default(), salt: new_token() }
    }
}

impl SessionStore for MemoryStore {
    fn save(&self, state: &SessionState, ledger: &TokenLedger) -> Result<String, StoreError> {
        Ok(self.index.lock().unwrap().upsert(state, ledger).token)
    }

    fn load(&self, token: &str) -> Result<Option<SessionRecord>, StoreError> {
        Ok(self.index.lock().unwrap().by_token.get(token).cloned())
    }

    fn records(&self) -> Result<Vec<SessionRecord>, StoreError> {
        Ok(self.index.lock().unwrap().sorted())
    }

    fn salt(&self) -> String {
        self.salt.clone()
    }

    fn put_flow(&self, id: &str, document: &str) -> Result<(), StoreError> {
        self.flows.lock().unwrap().insert(id.to_string(), document.to_string());
        Ok(())
    }

    fn flows(&self) -> Result<Vec<String>, StoreError> {
        Ok(self.flows.lock().unwrap().values().cloned().collect())
    }

    fn purge(&self, cutoff: u64) -> Result<usize, StoreError> {
        Ok(self.index.lock().unwrap().remove_before(cutoff).len())
    }
}

/// A directory of `sessions/<token>.json` records, `flows/<id>.json` documents and a `salt` file.
#[derive(Debug)]
pub struct FileStore {
    root: PathBuf,
    index: Mutex<Index>,
    salt: String,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension(format!("tmp{:08x}", rand::random::<u32>()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

impl FileStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("sessions"))?;
        fs::create_dir_all(root.join("flows"))?;
        let salt_path = root.join("salt");
        let salt = match fs::read_to_string(&salt_path) {
            Ok(s) if !s.trim().is_empty() => s.trim().to_string(),
            _ => {
                let s = new_token();
                write_atomic(&salt_path, s.as_bytes())?;
                s
            }
        };
        let mut index = Index::default();
        for entry in fs::read_dir(root.join("sessions"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let record: SessionRecord = serde_json::from_slice(&fs::read(&path)?)
                .map_err(|e| StoreError::Storage(format!("{}: {e}", path.display())))?;
            index.by_session.insert(record.state.session_id.clone(), record.token.clone());
            index.by_token.insert(record.token.clone(), record);
        }
        Ok(Self { root, index: Mutex::new(index), salt })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl SessionStore for FileStore {
    fn save(&self, state: &SessionState, ledger: &TokenLedger) -> Result<String, StoreError> {
        let mut index = self.index.lock().unwrap();
        let record = index.upsert(state, ledger);
        let path = self.root.join("sessions").join(format!("{}.json", record.token));
        write_atomic(&path, &serde_json::to_vec(&record)?)?;
        Ok(record.token)
    }

    fn load(&self, token: &str) -> Result<Option<SessionRecord>, StoreError> {
        Ok(self.index.lock().unwrap().by_token.get(token).cloned())
    }

    fn records(&self) -> Result<Vec<SessionRecord>, StoreError> {
        Ok(self.index.lock().unwrap().sorted())
    }

    fn salt(&self) -> String {
        self.salt.clone()
    }

    fn put_flow(&self, id: &str, document: &str) -> Result<(), StoreError> {
        let safe: String = id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
        write_atomic(&self.root.join("flows").join(format!("{safe}.json")), document.as_bytes())
    }

    fn flows(&self) -> Result<Vec<String>, StoreError> {
        let mut paths: Vec<PathBuf> = fs::read_dir(self.root.join("flows"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
            .collect();
        paths.sort();
        paths.iter().map(|p| fs::read_to_string(p).map_err(StoreError::from)).collect()
    }

    fn purge(&self, cutoff: u64) -> Result<usize, StoreError> {
        let mut index = self.index.lock().unwrap();
        let stale = index.remove_before(cutoff);
        for token in &stale {
            match fs::remove_file(self.root.join("sessions").join(format!("{token}.json"))) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        }
        Ok(stale.len())
    }
}

/// Stable per-session pseudonym that cannot be linked back to the token.
pub fn pseudonym(salt: &str, session_id: &str) -> String {
    let digest = Sha256::digest(format!("{salt}:{session_id}").as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub participant_id: String,
    pub flow_id: String,
    pub flow_version: String,
    pub status: SessionStatus,
    pub answered_fraction: f64,
    pub unresolved_clarifications: u32,
    pub accepted: bool,
    pub quality_flags: Vec<String>,
    pub variables: BTreeMap<String, Option<Value>>,
    pub summaries: BTreeMap<String, String>,
}

pub const CSV_HEADER: [&str; 10] = [
    "participant_id",
    "flow_id",
    "flow_version",
    "status",
    "answered_fraction",
    "unresolved_clarifications",
    "accepted",
    "quality_flags",
    "variables",
    "summaries",
];

fn scrub(text: &str) -> String {
    privacy::scrub(text, &[]).text
}

/// Builds export rows: identity fields dropped, every string screened and redacted.
pub fn export_anonymized(records: &[SessionRecord], flows: &[FlowDefinition], salt: &str, rule: &QualityRule) -> Vec<ExportRecord> {
    records
        .iter()
        .map(|r| {
            let flow = flows.iter().find(|f| f.id == r.flow_id);
            let identity = |node: &str| flow.and_then(|f| f.node(node)).is_some_and(|n| n.identity_optin);
            let outcomes = postprocess::node_outcomes(&r.state, flow);
            let quality = postprocess::assess(&r.state, flow, rule);
            let variables = r
                .state
                .variables
                .iter()
                .filter(|(_, b)| !b.provenance.as_ref().is_some_and(|p| identity(&p.node)))
                .map(|(k, b)| {
                    let v = b.value.clone().map(|v| match v {
                        Value::Str(s) => Value::Str(scrub(&s)),
                        other => other,
                    });
                    (k.to_string(), v)
                })
                .collect();
            let summaries = outcomes
                .iter()
                .filter(|o| !o.identity && o.answered)
                .map(|o| (o.node.clone(), scrub(o.paraphrase.as_deref().unwrap_or(&o.response))))
                .collect();
            ExportRecord {
                participant_id: pseudonym(salt, &r.state.session_id),
                flow_id: r.flow_id.clone(),
                flow_version: r.flow_version.clone(),
                status: r.state.status,
                answered_fraction: quality.answered_fraction,
                unresolved_clarifications: quality.unresolved_clarifications,
                accepted: quality.reasons.is_empty(),
                quality_flags: quality.reasons.iter().map(|q| q.as_str().to_string()).collect(),
                variables,
                summaries,
            }
        })
        .collect()
}

fn status_name(s: SessionStatus) -> &'static str {
    match s {
        SessionStatus::Active => "active",
        SessionStatus::Completed => "completed",
        SessionStatus::Abandoned => "abandoned",
    }
}

/// RFC 4180 CSV with a header row; JSON columns hold the variable and summary maps.
pub fn export_csv(rows: &[ExportRecord]) -> Result<String, StoreError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(|e| StoreError::Storage(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.participant_id.clone(),
            r.flow_id.clone(),
            r.flow_version.clone(),
            status_name(r.status).to_string(),
            format!("{:.4}", r.answered_fraction),
            r.unresolved_clarifications.to_string(),
            r.accepted.to_string(),
            r.quality_flags.join(";"),
            serde_json::to_string(&r.variables)?,
            serde_json::to_string(&r.summaries)?,
        ])
        .map_err(|e| StoreError::Storage(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| StoreError::Storage(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| StoreError::Storage(e.to_string()))
}

pub fn export_jsonl(rows: &[ExportRecord]) -> Result<String, StoreError> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Input;
    use crate::flow::parse_flow;
    use crate::gateway::Fixture;
    use crate::replay::{replay, ReplayOptions};

    fn session(id: &str, answer: &str) -> (FlowDefinition, SessionState) {
        let flow = parse_flow(
            r#"{"id": "f", "version": "1", "mode": "structured", "languages": ["en"],
                "variables": [{"name": "where", "kind": "string"}],
                "nodes": [{"id": "a", "kind": "open", "template": "Where do you live?", "extract": ["where"], "default_target": "END"}]}"#,
        )
        .unwrap();
        let fx = Fixture { backend: vec![], participant: vec![Input::Text(answer.into())] };
        let opts = ReplayOptions { session_id: id.into(), ..Default::default() };
        (flow.clone(), replay(&flow, &fx, &opts).unwrap().state)
    }

    #[test]
    fn save_load_and_update_keep_token() {
        let store = MemoryStore::new();
        let (_, mut st) = session("s1", "downtown");
        let t1 = store.save(&st, &TokenLedger::default()).unwrap();
        st.turn_count = 99;
        let t2 = store.save(&st, &TokenLedger::default()).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(store.load(&t1).unwrap().unwrap().state.turn_count, 99);
        assert_eq!(store.resume("nope"), Resume::New);
        assert_eq!(store.resume(&t1), Resume::New, "completed sessions start over");
    }

    #[test]
    fn file_store_round_trip_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let (_, st) = session("s1", "downtown");
        let token = {
            let store = FileStore::open(dir.path()).unwrap();
            store.save(&st, &TokenLedger::default()).unwrap()
        };
        let store = FileStore::open(dir.path()).unwrap();
        assert_eq!(store.load(&token).unwrap().unwrap().state, st);
        let salt = store.salt();
        assert_eq!(FileStore::open(dir.path()).unwrap().salt(), salt);
    }

    #[test]
    fn tokens_unique_across_sessions() {
        let store = MemoryStore::new();
        let (_, st) = session("s", "x");
        let tokens: std::collections::BTreeSet<String> = (0..100)
            .map(|i| {
                let mut s = st.clone();
                s.session_id = format!("s{i}");
                store.save(&s, &TokenLedger::default()).unwrap()
            })
            .collect();
        assert_eq!(tokens.len(), 100);
    }

    #[test]
    fn export_is_scrubbed() {
        let (flow, st) = session("s1", "mail ana@example.org, postal code H3A 0C3");
        let store = MemoryStore::new();
        store.save(&st, &TokenLedger::default()).unwrap();
        let rows = export_anonymized(&store.records().unwrap(), &[flow], &store.salt(), &QualityRule::default());
        let csv = export_csv(&rows).unwrap();
        let jsonl = export_jsonl(&rows).unwrap();
        for out in [&csv, &jsonl] {
            assert!(!out.contains("ana@example.org"));
            assert!(!out.contains("0C3"));
            assert!(privacy::screen(out).is_clean());
        }
        assert_ne!(rows[0].participant_id, store.records().unwrap()[0].token);
        assert_eq!(export_csv(&[]).unwrap().lines().count(), 1);
    }

    #[test]
    fn purge_removes_only_stale_records() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        let (_, a) = session("a", "downtown");
        let (_, b) = session("b", "uptown");
        let ta = store.save(&a, &TokenLedger::default()).unwrap();
        assert_eq!(purge_older_than(&store, 1).unwrap(), 0);
        let cutoff = store.load(&ta).unwrap().unwrap().updated_at + 1;
        std::thread::sleep(std::time::Duration::from_millis(5));
        let tb = store.save(&b, &TokenLedger::default()).unwrap();
        assert_eq!(store.purge(cutoff).unwrap(), 1);
        assert!(store.load(&ta).unwrap().is_none());
        assert!(store.load(&tb).unwrap().is_some());
        assert!(!dir.path().join("sessions").join(format!("{ta}.json")).exists());
        let reopened = FileStore::open(dir.path()).unwrap();
        assert_eq!(reopened.records().unwrap().len(), 1);
        assert_ne!(store.save(&a, &TokenLedger::default()).unwrap(), ta);
    }
}
