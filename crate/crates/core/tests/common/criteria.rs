//! One check per acceptance criterion. Each returns a short detail line or the failure reason.

use std::collections::{BTreeMap, BTreeSet};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::test_runner::{Config, TestCaseError, TestRunner};
use serde_json::json;

use interlocutor::engine::{Engine, Input, LogicalClock, SessionState};
use interlocutor::flow::{parse_flow, ConfigOverrides, FlowDefinition, KbKind, ModelRole};
use interlocutor::gateway::{
    Backend, BackendError, BackendReply, Fixture, Gateway, Locality, ModelRequest, ScriptedBackend, TokenLedger,
};
use interlocutor::knowledge::{parse_entries, KnowledgeStore};
use interlocutor::postprocess::{compare_memory_strategies, load_plan, run_sensitivity, QualityRule};
use interlocutor::privacy::{self, parse_corpus, CorpusLabel, PiiCategory};
use interlocutor::replay::{feed, replay, scripted_engine, ReplayOptions};
use interlocutor::store::{export_anonymized, export_csv, export_jsonl, SessionRecord};
use interlocutor::text::terms;

use super::gen::{branch_flow, budget_flow};
use super::{drive, flow, flows_dir, read};

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn golden_replay() -> Check {
    let dir = flows_dir();
    let started = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_interlocutor"))
        .args(["run", "--flow", "expert_interview.json", "--script", "expert_interview.script.json"])
        .current_dir(&dir)
        .output()
        .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure(out.status.success(), || format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))?;
    let golden = read("expert_interview.golden.txt");
    let got = String::from_utf8(out.stdout).map_err(|e| e.to_string())?;
    if got != golden {
        let line = got.lines().zip(golden.lines()).position(|(a, b)| a != b).unwrap_or(got.lines().count().min(golden.lines().count()));
        return Err(format!("transcript differs from golden at line {}", line + 1));
    }
    let lower = golden.to_lowercase();
    ensure(lower.matches("could you please provide more details").count() == 2, || "missing clarification exchanges".into())?;
    ensure(golden.contains("Great. I am listening :)"), || "missing voluntary add prompt".into())?;
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("{} bytes identical in {:.0} ms", golden.len(), elapsed.as_secs_f64() * 1e3))
}

const INSUFFICIENT: &str = r#"[
    {"role": "sufficiency_judge", "response": "0 needs more"},
    {"role": "clarifier", "response": "Could you say more?"},
    {"role": "intent_matcher", "response": "NONE"},
    {"role": "summarizer", "response": "So you said something."},
    {"role": "extractor", "response": "bus"}]"#;

fn insufficient_engine() -> Engine {
    super::scripted_engine(INSUFFICIENT, "s", Locality::Local)
}

pub fn termination_budget(cases: u32) -> Check {
    let started = Instant::now();
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner
        .run(&budget_flow(), |g| {
            let f = parse_flow(&g.to_json()).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let engine = insufficient_engine();
            let (mut st, _) = engine.start_session(&f, &ConfigOverrides::default(), None).unwrap();
            drive(&engine, &f, &mut st, 200, |_| Input::Text("something unrelated".into()));
            if st.is_active() {
                return Err(TestCaseError::fail("session did not terminate"));
            }
            let expected = g.expected_question_turns();
            if st.agent_question_turns() != expected {
                return Err(TestCaseError::fail(format!("{} question turns, expected {expected}", st.agent_question_turns())));
            }
            for (i, node) in g.nodes.iter().enumerate() {
                let used = st.clarifications_used.get(&format!("n{i}")).copied().unwrap_or(0);
                if used > node.budget {
                    return Err(TestCaseError::fail(format!("n{i} used {used} of {}", node.budget)));
                }
            }
            for i in g.path() {
                if st.clarifications_used.get(&format!("n{i}")).copied() != Some(g.nodes[i].budget) {
                    return Err(TestCaseError::fail(format!("n{i} did not spend its budget")));
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("{cases} random flows in {:.2} s", elapsed.as_secs_f64()))
}

const CONVERSATIONAL: [ModelRole; 3] = [ModelRole::SufficiencyJudge, ModelRole::Clarifier, ModelRole::Summarizer];

pub fn structured_purity(cases: u32) -> Check {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    let calls = std::cell::Cell::new(0usize);
    runner
        .run(&(budget_flow(), proptest::bool::ANY), |(g, typed)| {
            let mut doc: serde_json::Value = serde_json::from_str(&g.to_json()).unwrap();
            doc["mode"] = json!("structured");
            doc["variables"] = json!([{"name": "mode", "kind": "string"}]);
            for node in doc["nodes"].as_array_mut().unwrap() {
                node["extract"] = json!(["mode"]);
            }
            let all: serde_json::Map<String, serde_json::Value> =
                ModelRole::ALL.iter().filter(|r| **r != ModelRole::PiiScreener).map(|r| (r.as_str().to_string(), json!("s"))).collect();
            doc["config"]["model_bindings"] = serde_json::Value::Object(all);
            let f = parse_flow(&doc.to_string()).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let engine = insufficient_engine();
            let (mut st, _) = engine.start_session(&f, &ConfigOverrides::default(), None).unwrap();
            let node_kind = |st: &SessionState| f.node(&st.current_node).map(|n| n.options.is_empty());
            drive(&engine, &f, &mut st, 200, |st| match (typed, node_kind(st)) {
                (false, Some(false)) => Input::Choice("a".into()),
                _ => Input::Text("tell me a joke".into()),
            });
            if st.is_active() {
                return Err(TestCaseError::fail("session did not terminate"));
            }
            let log = engine.gateway().dispatch_log();
            calls.set(calls.get() + log.len());
            if let Some(r) = log.iter().find(|r| CONVERSATIONAL.contains(&r.role)) {
                return Err(TestCaseError::fail(format!("{} called in structured mode", r.role.as_str())));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} structured flows, 0 conversational calls among {} dispatches", calls.get()))
}

pub fn branching_oracle(cases: u32) -> Check {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    let compared = std::cell::Cell::new(0usize);
    runner
        .run(&branch_flow(), |g| {
            let f = parse_flow(&g.to_json()).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let engine = Engine::new(Arc::new(Gateway::new())).with_clock(Arc::new(LogicalClock));
            for a in g.assignments() {
                let (mut st, _) = engine.start_session(&f, &ConfigOverrides::default(), None).unwrap();
                drive(&engine, &f, &mut st, 20, |st| {
                    let i: usize = st.current_node[1..].parse().unwrap();
                    Input::Choice(g.domains[i].option(a[i]))
                });
                let got: Vec<usize> = st.visited_nodes().iter().map(|n| n[1..].parse().unwrap()).collect();
                let want = g.path(&a);
                if got != want {
                    return Err(TestCaseError::fail(format!("assignment {a:?}: engine {got:?}, oracle {want:?} in {}", g.to_json())));
                }
                compared.set(compared.get() + 1);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} flows, {} assignments, 100% agreement", compared.get()))
}

/// Whitespace tokens of the fixed judge and extractor prompt text, counted by hand.
const JUDGE_FIXED: u64 = 41;
const EXTRACTOR_FIXED: u64 = 21;
const NODES: u64 = 10;
const QUESTION_TOKENS: u64 = 10;
const SYSTEM_TOKENS: u64 = 5;
const VAR_TOKENS: u64 = 5;

fn token_fixture(response_tokens: u64) -> (FlowDefinition, Fixture) {
    let nodes: Vec<_> = (0..NODES)
        .map(|i| {
            json!({"id": format!("q{i}"), "kind": "open",
                   "template": format!("Question {i} of ten: how do you usually travel there?"),
                   "extract": [format!("v{i}")], "max_clarifications": 0, "paraphrase": false,
                   "default_target": if i + 1 == NODES { "END".to_string() } else { format!("q{}", i + 1) }})
        })
        .collect();
    let variables: Vec<_> = (0..NODES).map(|i| json!({"name": format!("v{i}"), "kind": "string"})).collect();
    let doc = json!({"id": "tokens", "version": "1", "mode": "semi_structured", "languages": ["en"],
        "system_prompt": "You are a survey assistant.",
        "config": {"model_bindings": {"sufficiency_judge": "s", "extractor": "s"}},
        "variables": variables, "nodes": nodes});
    let answer = vec!["word"; response_tokens as usize].join(" ");
    let mut entries = vec![
        json!({"role": "sufficiency_judge", "response": "1"}),
        json!({"role": "extractor", "response": "a b c d e"}),
    ];
    entries.extend((0..NODES).map(|_| json!({"role": "participant", "response": answer})));
    (parse_flow(&doc.to_string()).unwrap(), Fixture::parse(&json!(entries).to_string()).unwrap())
}

pub fn token_saving() -> Check {
    let response = 50;
    let (f, fx) = token_fixture(response);
    let cmp = compare_memory_strategies(&f, &fx, None, 0).map_err(|e| e.to_string())?;
    ensure(cmp.rows.len() == NODES as usize, || format!("{} turns recorded", cmp.rows.len()))?;
    let slice = (1 + QUESTION_TOKENS) + (1 + response);
    let base = 2 * SYSTEM_TOKENS + JUDGE_FIXED + EXTRACTOR_FIXED + 2 * slice;
    for (t, row) in cmp.rows.iter().enumerate() {
        let t = t as u64;
        ensure(row.full == base + t * slice, || format!("turn {}: full {} != {}", t + 1, row.full, base + t * slice))?;
        ensure(row.extracted == base + t * VAR_TOKENS, || format!("turn {}: extracted {}", t + 1, row.extracted))?;
        if t >= 1 {
            ensure(row.extracted <= row.full, || format!("turn {}: extracted exceeds full", t + 1))?;
        }
        ensure(row.extracted <= base + (NODES - 1) * VAR_TOKENS, || "extracted exceeds its bound".into())?;
    }
    ensure(cmp.rows.windows(2).all(|w| w[0].full <= w[1].full), || "full is not nondecreasing".into())?;
    let tri = NODES * (NODES - 1) / 2;
    let total_full = NODES * base + slice * tri;
    let total_extracted = NODES * base + VAR_TOKENS * tri;
    ensure(cmp.total_full == total_full, || format!("full total {} != {total_full}", cmp.total_full))?;
    ensure(cmp.total_extracted == total_extracted, || format!("extracted total {} != {total_extracted}", cmp.total_extracted))?;
    // Longer answers inflate full-history prompts but leave the memory part of extracted prompts unchanged.
    let (f, fx) = token_fixture(2 * response);
    let long = compare_memory_strategies(&f, &fx, None, 0).map_err(|e| e.to_string())?;
    let growth = |rows: &[interlocutor::postprocess::MemoryRow]| rows.last().unwrap().extracted - rows[0].extracted;
    ensure(growth(&long.rows) == growth(&cmp.rows), || "extracted memory depends on answer length".into())?;
    Ok(format!("full {total_full} vs extracted {total_extracted} tokens over {NODES} turns"))
}

/// Stands in for a local screening model that recognizes a fixed list of names.
pub struct NameScreener(pub Vec<&'static str>);

pub const NAMES: [&str; 4] = ["Marie Tremblay", "Ahmed Haddad", "Chen Wei", "Sophie Gagnon"];

impl Backend for NameScreener {
    fn id(&self) -> &str {
        "local"
    }
    fn locality(&self) -> Locality {
        Locality::Local
    }
    fn complete(&self, req: &ModelRequest) -> Result<BackendReply, BackendError> {
        let text = req.user_prompt.rsplit("Text:\n").next().unwrap_or("");
        let found: Vec<String> = self.0.iter().filter(|n| text.contains(*n)).map(|n| format!("person_name: {n}")).collect();
        let text = if found.is_empty() { "NONE".to_string() } else { found.join("\n") };
        Ok(BackendReply { text, prompt_tokens: None, completion_tokens: None })
    }
}

fn deterministic(c: PiiCategory) -> bool {
    matches!(c, PiiCategory::Email | PiiCategory::Phone | PiiCategory::FullPostalCode | PiiCategory::Address)
}

fn full_postal(text: &str) -> bool {
    privacy::screen(text).spans.iter().any(|s| s.category == PiiCategory::FullPostalCode)
}

pub fn privacy_gate() -> Check {
    let corpus = parse_corpus(&read("pii_corpus.tsv"))?;
    ensure(corpus.len() == 20, || format!("{} corpus items", corpus.len()))?;
    let mut detected = 0;
    let mut det_total = 0;
    for item in &corpus {
        let verdict = privacy::screen(&item.text);
        match item.label {
            CorpusLabel::Pii(c) if deterministic(c) => {
                det_total += 1;
                ensure(verdict.spans.iter().any(|s| s.category == c), || format!("missed {c:?} in {:?}", item.text))?;
                detected += 1;
            }
            CorpusLabel::Clean => ensure(verdict.is_clean(), || format!("false positive on {:?}", item.text))?,
            CorpusLabel::Pii(_) => {}
        }
    }

    let nodes: Vec<_> = (0..corpus.len())
        .map(|i| {
            json!({"id": format!("p{i}"), "kind": "open", "template": format!("Tell me about your commute ({i})?"),
                   "extract": ["mode"], "max_clarifications": 1,
                   "default_target": if i + 1 == corpus.len() { "END".to_string() } else { format!("p{}", i + 1) }})
        })
        .collect();
    let doc = json!({"id": "privacy", "version": "1", "mode": "semi_structured", "languages": ["en"],
        "system_prompt": "You are a survey assistant.",
        "config": {"model_bindings": {"sufficiency_judge": "cloud", "clarifier": "cloud", "summarizer": "cloud",
                                      "extractor": "cloud", "pii_screener": "local"},
                   "privacy_policy": "redact_then_cloud"},
        "variables": [{"name": "mode", "kind": "string"}], "nodes": nodes});
    let f = parse_flow(&doc.to_string()).map_err(|e| e.to_string())?;
    let fx = Fixture::parse(
        r#"[{"role": "sufficiency_judge", "response": "1"}, {"role": "summarizer", "response": "Thanks for sharing that."},
            {"role": "extractor", "response": "bus"}]"#,
    )?;
    let gw = Gateway::new().with_request_log();
    gw.register(Arc::new(ScriptedBackend::new("cloud", Locality::Cloud, fx.backend, false)));
    gw.register(Arc::new(NameScreener(NAMES.to_vec())));
    let engine = Engine::new(Arc::new(gw)).with_clock(Arc::new(LogicalClock));
    let (mut st, _) = engine.start_session(&f, &ConfigOverrides::default(), None).map_err(|e| e.to_string())?;
    let mut answers = corpus.iter().map(|c| c.text.clone());
    drive(&engine, &f, &mut st, 200, |_| Input::Text(answers.next().unwrap_or_default()));
    ensure(!st.is_active(), || "session did not complete".into())?;

    let flagged = engine.gateway().flagged(&st.session_id);
    for name in NAMES {
        ensure(flagged.iter().any(|(s, _)| s == name), || format!("{name} was not flagged"))?;
    }
    let log = engine.gateway().dispatch_log();
    let cloud: Vec<_> = log.iter().filter(|r| r.locality == Locality::Cloud).collect();
    ensure(!cloud.is_empty(), || "no cloud dispatches".into())?;
    for r in &cloud {
        let prompt = format!("{}\n{}", r.system_prompt, r.user_prompt);
        if let Some((s, _)) = flagged.iter().find(|(s, _)| prompt.contains(s.as_str())) {
            return Err(format!("flagged {s:?} reached a cloud {} prompt", r.role.as_str()));
        }
        ensure(!full_postal(&prompt), || "full postal code in a cloud prompt".into())?;
    }

    for item in corpus.iter().filter(|c| c.label == CorpusLabel::Pii(PiiCategory::FullPostalCode)) {
        let code = privacy::screen(&item.text).spans.iter().find(|s| s.category == PiiCategory::FullPostalCode).map(|s| item.text[s.start..s.end].to_string()).unwrap();
        let stored = st.transcript.iter().find(|e| e.text.contains(&code[..3])).map(|e| e.text.clone());
        ensure(stored.is_some(), || format!("{code} left no 3-character prefix"))?;
    }
    ensure(st.transcript.iter().all(|e| !full_postal(&e.text)), || "full postal code stored".into())?;

    let ledger = engine.gateway().report_tokens(&st.session_id).unwrap_or_default();
    let record = SessionRecord {
        token: "t".into(),
        flow_id: f.id.clone(),
        flow_version: f.version.clone(),
        state: st,
        ledger,
        created_at: 0,
        updated_at: 0,
    };
    let rows = export_anonymized(&[record], &[f], "salt", &QualityRule::default());
    for body in [export_csv(&rows).map_err(|e| e.to_string())?, export_jsonl(&rows).map_err(|e| e.to_string())?] {
        if let Some((s, _)) = flagged.iter().find(|(s, _)| body.contains(s.as_str())) {
            return Err(format!("flagged {s:?} appears in an export"));
        }
        ensure(!full_postal(&body), || "full postal code in an export".into())?;
    }
    Ok(format!(
        "{detected}/{det_total} pattern items detected, {} flagged substrings kept out of {} cloud prompts and exports",
        flagged.len(),
        cloud.len()
    ))
}

pub fn sensitivity_harness() -> Check {
    let plan = load_plan(&flows_dir().join("expert_interview.plan.json"))?;
    let r = run_sensitivity(&plan).map_err(|e| e.to_string())?;
    ensure(r.delta("baseline", "baseline_repeat") == Some(0.0), || format!("identical δ = {:?}", r.delta("baseline", "baseline_repeat")))?;
    ensure(r.delta("baseline", "reworded_q2") == Some(0.0), || "reworded δ != 0".into())?;
    ensure(r.delta("baseline", "strict_judge") == Some(1.0), || format!("disjoint δ = {:?}", r.delta("baseline", "strict_judge")))?;
    let invalid = r.variants.iter().find(|v| v.label == "statement_q1").ok_or("missing variant")?;
    ensure(invalid.excluded_runs == plan.runs_per_variant && invalid.valid_runs == 0, || "invalid variant not excluded".into())?;
    ensure(r.delta("baseline", "statement_q1").is_none(), || "δ reported for an all-invalid variant".into())?;
    let valid: u32 = r.variants.iter().map(|v| v.valid_runs).sum();
    let runs: u32 = r.variants.iter().map(|v| v.runs).sum();
    ensure(r.total_runs == runs && valid + r.excluded_runs == r.total_runs, || "run counts do not reconcile".into())?;
    ensure(r.excluded_runs == plan.runs_per_variant, || format!("{} excluded", r.excluded_runs))?;
    Ok(format!("identical 0, disjoint 1.0, {} of {} runs excluded", r.excluded_runs, r.total_runs))
}

/// Runs the golden script, pausing after `cut` participant turns and resuming in a fresh engine.
pub fn resume_at(f: &FlowDefinition, fx: &Fixture, cut: usize) -> Result<SessionState, String> {
    let overrides = ConfigOverrides { seed: Some(0), ..Default::default() };
    let config = overrides.apply(&f.config);
    let (a, _) = scripted_engine(fx, &config, true);
    let (mut st, _) = a.start_session_with_id(f, &overrides, None, "replay".into()).map_err(|e| e.to_string())?;
    feed(&a, f, &mut st, &fx.participant[..cut]).map_err(|e| e.to_string())?;
    let saved_state = serde_json::to_string(&st).map_err(|e| e.to_string())?;
    let saved_ledger = serde_json::to_string(&a.gateway().report_tokens(&st.session_id).unwrap_or_default()).map_err(|e| e.to_string())?;
    drop(a);

    let (b, _) = scripted_engine(fx, &config, true);
    let mut st: SessionState = serde_json::from_str(&saved_state).map_err(|e| e.to_string())?;
    let ledger: TokenLedger = serde_json::from_str(&saved_ledger).map_err(|e| e.to_string())?;
    b.gateway().restore_session(&st.session_id, ledger);
    feed(&b, f, &mut st, &fx.participant[cut..]).map_err(|e| e.to_string())?;
    Ok(st)
}

pub fn resume_equivalence() -> Check {
    let f = flow("expert_interview.json");
    let fx = super::fixture("expert_interview.script.json");
    let whole = replay(&f, &fx, &ReplayOptions::default().seed(0)).map_err(|e| e.to_string())?;
    ensure(whole.completed(), || "uninterrupted run incomplete".into())?;
    let turns = fx.participant.len();
    for cut in 0..=turns {
        let st = resume_at(&f, &fx, cut)?;
        ensure(st.transcript == whole.state.transcript, || format!("transcript differs when resumed after turn {cut}"))?;
        ensure(st.variables == whole.state.variables && st.status == whole.state.status, || format!("state differs after turn {cut}"))?;
    }
    Ok(format!("{} interruption points, all identical", turns + 1))
}

/// Dense TF-IDF cosine over the full vocabulary, computed from scratch per query.
pub fn brute_force_rank(docs: &[(String, String)], query: &str) -> Vec<(String, f64)> {
    let n = docs.len() as f64;
    let tfs: Vec<BTreeMap<String, f64>> = docs
        .iter()
        .map(|(_, text)| {
            let mut m = BTreeMap::new();
            for t in terms(text) {
                *m.entry(t).or_insert(0.0) += 1.0;
            }
            m
        })
        .collect();
    let vocab: BTreeSet<&String> = tfs.iter().flat_map(|m| m.keys()).collect();
    let idf: BTreeMap<&String, f64> = vocab
        .iter()
        .map(|t| {
            let df = tfs.iter().filter(|m| m.contains_key(*t)).count() as f64;
            (*t, ((1.0 + n) / (1.0 + df)).ln() + 1.0)
        })
        .collect();
    let mut qtf: BTreeMap<String, f64> = BTreeMap::new();
    for t in terms(query) {
        *qtf.entry(t).or_insert(0.0) += 1.0;
    }
    let qvec: Vec<f64> = vocab.iter().map(|t| qtf.get(*t).copied().unwrap_or(0.0) * idf[t]).collect();
    let qnorm = qvec.iter().map(|w| w * w).sum::<f64>().sqrt();
    let mut out: Vec<(String, f64)> = docs
        .iter()
        .zip(&tfs)
        .filter_map(|((id, _), tf)| {
            let dvec: Vec<f64> = vocab.iter().map(|t| tf.get(*t).copied().unwrap_or(0.0) * idf[t]).collect();
            let dot: f64 = qvec.iter().zip(&dvec).map(|(a, b)| a * b).sum();
            let dnorm = dvec.iter().map(|w| w * w).sum::<f64>().sqrt();
            (qnorm > 0.0 && dot > 0.0).then(|| (id.clone(), dot / (qnorm * dnorm)))
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

pub fn retrieval_determinism() -> Check {
    let entries = parse_entries(&read("kb_documents.json")).map_err(|e| e.to_string())?;
    ensure(entries.len() == 10, || format!("{} documents", entries.len()))?;
    let queries: Vec<String> = serde_json::from_str(&read("kb_queries.json")).map_err(|e| e.to_string())?;
    ensure(queries.len() == 20, || format!("{} queries", queries.len()))?;
    let docs: Vec<(String, String)> = entries.iter().map(|e| (e.id.clone(), e.text.clone())).collect();
    let store = KnowledgeStore::new();
    store.ingest("docs", KbKind::Document, entries).map_err(|e| e.to_string())?;
    let mut hits_total = 0;
    for q in &queries {
        let got = store.retrieve("docs", q, docs.len()).map_err(|e| e.to_string())?;
        let want = brute_force_rank(&docs, q);
        let ids: Vec<&str> = got.iter().map(|h| h.entry_id.as_str()).collect();
        let want_ids: Vec<&str> = want.iter().map(|(id, _)| id.as_str()).collect();
        ensure(ids == want_ids, || format!("{q:?}: {ids:?} vs oracle {want_ids:?}"))?;
        for (h, (_, s)) in got.iter().zip(&want) {
            ensure((h.score - s).abs() < 1e-12, || format!("{q:?}: score {} vs {s}", h.score))?;
        }
        let again = store.retrieve("docs", q, docs.len()).map_err(|e| e.to_string())?;
        ensure(again == got, || format!("{q:?}: ranking changed between calls"))?;
        hits_total += got.len();
    }
    Ok(format!("{} queries, {hits_total} ranked hits match the oracle", queries.len()))
}

