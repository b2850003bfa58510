//! Lexical retrieval over glossaries, documents and candidate-question banks.
//!
//! Scoring is TF-IDF with cosine normalization. Terms come from [`crate::text::terms`].
//! For a collection of `N` entries, `idf(t) = ln((1 + N) / (1 + df(t))) + 1`, an entry's
//! weight for `t` is `tf * idf(t)` and the query is weighted the same way. The score is the
//! cosine of the two weight vectors; only positive scores are returned, ordered by descending
//! score and then ascending entry id.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{FlowDefinition, KbKind};
use crate::text::terms;

const SNIPPET_CHARS: usize = 160;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbEntry {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub metadata: serde_json::Value,
}

impl KbEntry {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into(), metadata: serde_json::Value::Null }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalHit {
    pub entry_id: String,
    pub score: f64,
    pub snippet: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KnowledgeError {
    #[error("entry id `{0}` already present")]
    DuplicateEntryId(String),
    #[error("unknown knowledge base `{0}`")]
    UnknownKb(String),
    #[error("knowledge base `{id}` is a {actual:?}, not a {expected:?}")]
    WrongKbKind { id: String, expected: KbKind, actual: KbKind },
    #[error("ingest needs at least one entry")]
    EmptyIngest,
    #[error("retrieval needs k >= 1")]
    ZeroK,
    #[error("bad ingest file: {0}")]
    BadFile(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Index {
    /// term -> (entry position, term frequency)
    postings: BTreeMap<String, Vec<(usize, u32)>>,
    norms: Vec<f64>,
}

impl Index {
    fn build(entries: &[KbEntry]) -> Self {
        let mut postings: BTreeMap<String, Vec<(usize, u32)>> = BTreeMap::new();
        for (pos, e) in entries.iter().enumerate() {
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in terms(&e.text) {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push((pos, n));
            }
        }
        let mut index = Self { postings, norms: vec![0.0; entries.len()] };
        let n = entries.len();
        let mut sq = vec![0.0; n];
        for list in index.postings.values() {
            let idf = idf(n, list.len());
            for &(pos, tf) in list {
                let w = f64::from(tf) * idf;
                sq[pos] += w * w;
            }
        }
        index.norms = sq.into_iter().map(f64::sqrt).collect();
        index
    }
}

fn idf(n: usize, df: usize) -> f64 {
    ((1.0 + n as f64) / (1.0 + df as f64)).ln() + 1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    pub id: String,
    pub kind: KbKind,
    entries: Vec<KbEntry>,
    index: Index,
}

impl KnowledgeBase {
    pub fn new(id: impl Into<String>, kind: KbKind) -> Self {
        Self { id: id.into(), kind, entries: Vec::new(), index: Index::default() }
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds entries atomically: either all go in or none do.
    pub fn ingest(&mut self, entries: Vec<KbEntry>) -> Result<usize, KnowledgeError> {
        if entries.is_empty() {
            return Err(KnowledgeError::EmptyIngest);
        }
        let mut ids: BTreeSet<&str> = self.entries.iter().map(|e| e.id.as_str()).collect();
        for e in &entries {
            if !ids.insert(e.id.as_str()) {
                return Err(KnowledgeError::DuplicateEntryId(e.id.clone()));
            }
        }
        let count = entries.len();
        self.entries.extend(entries);
        self.rebuild();
        Ok(count)
    }

    pub fn rebuild(&mut self) {
        self.index = Index::build(&self.entries);
    }

    pub fn retrieve(&self, query: &str, k: usize) -> Result<Vec<RetrievalHit>, KnowledgeError> {
        if k == 0 {
            return Err(KnowledgeError::ZeroK);
        }
        let n = self.entries.len();
        let mut qtf: BTreeMap<String, u32> = BTreeMap::new();
        for t in terms(query) {
            *qtf.entry(t).or_insert(0) += 1;
        }
        let mut dots = vec![0.0; n];
        let mut qsq = 0.0;
        for (t, tf) in &qtf {
            let Some(list) = self.index.postings.get(t) else { continue };
            let idf = idf(n, list.len());
            let qw = f64::from(*tf) * idf;
            qsq += qw * qw;
            for &(pos, dtf) in list {
                dots[pos] += qw * f64::from(dtf) * idf;
            }
        }
        if qsq == 0.0 {
            return Ok(Vec::new());
        }
        let qnorm = qsq.sqrt();
        let mut hits: Vec<RetrievalHit> = dots
            .into_iter()
            .enumerate()
            .filter(|(_, d)| *d > 0.0)
            .map(|(pos, d)| {
                let e = &self.entries[pos];
                RetrievalHit {
                    entry_id: e.id.clone(),
                    score: d / (qnorm * self.index.norms[pos]),
                    snippet: crate::text::truncate_chars(&e.text, SNIPPET_CHARS).to_string(),
                }
            })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.entry_id.cmp(&b.entry_id)));
        hits.truncate(k);
        Ok(hits)
    }

    pub fn entry(&self, id: &str) -> Option<&KbEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Best-matching question for `goal` plus `history_summary`, skipping `exclude`.
    ///
    /// Falls back to the first unused entry when nothing overlaps.
    pub fn pick_candidate_question(
        &self,
        goal: &str,
        history_summary: &str,
        exclude: &BTreeSet<String>,
    ) -> Result<Option<KbEntry>, KnowledgeError> {
        if self.kind != KbKind::QuestionBank {
            return Err(KnowledgeError::WrongKbKind {
                id: self.id.clone(),
                expected: KbKind::QuestionBank,
                actual: self.kind,
            });
        }
        let query = format!("{goal} {history_summary}");
        let hits = self.retrieve(&query, self.entries.len().max(1))?;
        let by_rank = hits.iter().filter_map(|h| self.entry(&h.entry_id)).find(|e| !exclude.contains(&e.id));
        Ok(by_rank.or_else(|| self.entries.iter().find(|e| !exclude.contains(&e.id))).cloned())
    }
}

/// Parses a KB ingest file: a JSON array of `{id, text, metadata}`.
pub fn parse_entries(json: &str) -> Result<Vec<KbEntry>, KnowledgeError> {
    serde_json::from_str(json).map_err(|e| KnowledgeError::BadFile(e.to_string()))
}

/// Named knowledge bases with per-base exclusive ingest.
#[derive(Debug, Default)]
pub struct KnowledgeStore {
    bases: RwLock<BTreeMap<String, Arc<RwLock<KnowledgeBase>>>>,
}

impl KnowledgeStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn base(&self, id: &str) -> Result<Arc<RwLock<KnowledgeBase>>, KnowledgeError> {
        self.bases.read().unwrap().get(id).cloned().ok_or_else(|| KnowledgeError::UnknownKb(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.bases.read().unwrap().contains_key(id)
    }

    /// Ingests into `id`, creating the base with `kind` if needed.
    pub fn ingest(&self, id: &str, kind: KbKind, entries: Vec<KbEntry>) -> Result<usize, KnowledgeError> {
        let base = {
            let mut bases = self.bases.write().unwrap();
            bases.entry(id.to_string()).or_insert_with(|| Arc::new(RwLock::new(KnowledgeBase::new(id, kind)))).clone()
        };
        let mut kb = base.write().unwrap();
        kb.ingest(entries)
    }

    pub fn kind(&self, id: &str) -> Result<KbKind, KnowledgeError> {
        Ok(self.base(id)?.read().unwrap().kind)
    }

    pub fn len(&self, id: &str) -> Result<usize, KnowledgeError> {
        Ok(self.base(id)?.read().unwrap().len())
    }

    pub fn retrieve(&self, id: &str, query: &str, k: usize) -> Result<Vec<RetrievalHit>, KnowledgeError> {
        self.base(id)?.read().unwrap().retrieve(query, k)
    }

    pub fn entry(&self, id: &str, entry_id: &str) -> Result<Option<KbEntry>, KnowledgeError> {
        Ok(self.base(id)?.read().unwrap().entry(entry_id).cloned())
    }

    /// Ingests every knowledge base the flow names with a `source` file, resolved against `base`.
    ///
    /// Bases already present are left alone.
    pub fn load_flow_sources(&self, flow: &FlowDefinition, base: &std::path::Path) -> Result<(), KnowledgeError> {
        for kb in &flow.knowledge_bases {
            let Some(source) = &kb.source else { continue };
            if self.contains(&kb.id) {
                continue;
            }
            let path = base.join(source);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| KnowledgeError::BadFile(format!("{}: {e}", path.display())))?;
            self.ingest(&kb.id, kb.kind.unwrap_or(KbKind::Document), parse_entries(&text)?)?;
        }
        Ok(())
    }

    pub fn pick_candidate_question(
        &self,
        id: &str,
        goal: &str,
        history_summary: &str,
        exclude: &BTreeSet<String>,
    ) -> Result<Option<KbEntry>, KnowledgeError> {
        self.base(id)?.read().unwrap().pick_candidate_question(goal, history_summary, exclude)
    }
}
