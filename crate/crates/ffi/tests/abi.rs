use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use interlocutor_ffi::*;

fn flows_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/flows")
}

fn read(name: &str) -> CString {
    CString::new(std::fs::read_to_string(flows_dir().join(name)).unwrap()).unwrap()
}

/// Takes ownership of a library string.
unsafe fn take(s: *mut c_char) -> String {
    assert!(!s.is_null());
    let out = CStr::from_ptr(s).to_str().unwrap().to_string();
    ilc_string_free(s);
    out
}

fn last_error() -> String {
    let p = ilc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Fixture {
    flow: *mut IlcFlow,
    engine: *mut IlcEngine,
}

impl Fixture {
    fn new(flow: &str, script: Option<&str>) -> Self {
        let mut f = ptr::null_mut();
        let mut e = ptr::null_mut();
        unsafe {
            assert_eq!(ilc_flow_parse(read(flow).as_ptr(), &mut f), IlcStatus::Ok);
            assert_eq!(ilc_engine_new(&mut e), IlcStatus::Ok);
            if let Some(script) = script {
                let id = CString::new("scripted").unwrap();
                assert_eq!(ilc_engine_add_scripted(e, id.as_ptr(), true, read(script).as_ptr()), IlcStatus::Ok);
            }
        }
        Fixture { flow: f, engine: e }
    }

    fn start(&self, language: Option<&str>) -> Result<(*mut IlcSession, serde_json::Value), IlcStatus> {
        let lang = language.map(|l| CString::new(l).unwrap());
        let mut s = ptr::null_mut();
        let mut msg = ptr::null_mut();
        let status = unsafe {
            ilc_session_start(self.engine, self.flow, lang.as_ref().map_or(ptr::null(), |l| l.as_ptr()), &mut s, &mut msg)
        };
        if status != IlcStatus::Ok {
            return Err(status);
        }
        Ok((s, serde_json::from_str(&unsafe { take(msg) }).unwrap()))
    }
}

impl Drop for Fixture {
    fn drop(&mut self) {
        unsafe {
            ilc_engine_free(self.engine);
            ilc_flow_free(self.flow);
        }
    }
}

unsafe fn send(s: *mut IlcSession, input: &serde_json::Value) -> IlcStatus {
    let mut msg = ptr::null_mut();
    let status = match input {
        serde_json::Value::Object(m) if m.contains_key("text") => {
            let t = CString::new(m["text"].as_str().unwrap()).unwrap();
            ilc_session_send_text(s, t.as_ptr(), &mut msg)
        }
        serde_json::Value::Object(m) => {
            let t = CString::new(m["choice"].as_str().unwrap()).unwrap();
            ilc_session_choose(s, t.as_ptr(), &mut msg)
        }
        _ => unreachable!(),
    };
    if status == IlcStatus::Ok {
        take(msg);
    }
    status
}

fn participant_turns() -> Vec<serde_json::Value> {
    let entries: Vec<serde_json::Value> = serde_json::from_str(read("expert_interview.script.json").to_str().unwrap()).unwrap();
    entries
        .into_iter()
        .filter(|e| e["role"] == "participant")
        .map(|e| match e.get("option_id") {
            Some(o) => serde_json::json!({ "choice": o }),
            None => serde_json::json!({ "text": e["response"] }),
        })
        .collect()
}

#[test]
fn golden_session_through_the_abi() {
    let fx = Fixture::new("expert_interview.json", Some("expert_interview.script.json"));
    let (s, first) = fx.start(None).unwrap();
    assert_eq!(first["kind"], "question");
    unsafe {
        for turn in participant_turns() {
            assert_eq!(send(s, &turn), IlcStatus::Ok, "{}", last_error());
        }
        assert!(!ilc_session_is_active(s));
        let mut text = ptr::null_mut();
        assert_eq!(ilc_session_transcript(s, &mut text), IlcStatus::Ok);
        let golden = std::fs::read_to_string(flows_dir().join("expert_interview.golden.txt")).unwrap();
        assert_eq!(take(text), golden);

        let mut tokens = ptr::null_mut();
        assert_eq!(ilc_session_tokens(s, &mut tokens), IlcStatus::Ok);
        let ledger: serde_json::Value = serde_json::from_str(&take(tokens)).unwrap();
        assert_eq!(ledger["samples"].as_array().unwrap().len(), 14);

        let t = CString::new("more").unwrap();
        let mut msg = ptr::null_mut();
        assert_eq!(ilc_session_send_text(s, t.as_ptr(), &mut msg), IlcStatus::SessionNotActive);
        assert!(msg.is_null());
        ilc_session_free(s);
    }
}

#[test]
fn state_round_trips_through_json() {
    let fx = Fixture::new("expert_interview.json", Some("expert_interview.script.json"));
    let turns = participant_turns();
    let (s, _) = fx.start(None).unwrap();
    unsafe {
        for turn in &turns[..6] {
            assert_eq!(send(s, turn), IlcStatus::Ok);
        }
        let mut state = ptr::null_mut();
        assert_eq!(ilc_session_state(s, &mut state), IlcStatus::Ok);
        let state = CString::new(take(state)).unwrap();
        ilc_session_free(s);

        let mut restored = ptr::null_mut();
        assert_eq!(ilc_session_restore(fx.engine, fx.flow, state.as_ptr(), &mut restored), IlcStatus::Ok);
        assert!(ilc_session_is_active(restored));
        let mut text = ptr::null_mut();
        assert_eq!(ilc_session_transcript(restored, &mut text), IlcStatus::Ok);
        assert!(take(text).lines().count() > 6);
        ilc_session_free(restored);

        let other = Fixture::new("weather_travel.json", None);
        let mut wrong = ptr::null_mut();
        assert_eq!(ilc_session_restore(other.engine, other.flow, state.as_ptr(), &mut wrong), IlcStatus::InvalidInput);
        assert!(wrong.is_null());
    }
}

#[test]
fn error_statuses() {
    unsafe {
        let mut f = ptr::null_mut();
        assert_eq!(ilc_flow_parse(ptr::null(), &mut f), IlcStatus::NullArgument);
        let broken = CString::new("{\"id\": ").unwrap();
        assert_eq!(ilc_flow_parse(broken.as_ptr(), &mut f), IlcStatus::ParseError);
        assert!(f.is_null());
        assert!(!last_error().is_empty());

        let bad_utf8 = [0xffu8, 0xfe, 0];
        assert_eq!(ilc_flow_parse(bad_utf8.as_ptr().cast(), &mut f), IlcStatus::InvalidUtf8);

        let budgeted = CString::new(
            r#"{"id": "d", "version": "1", "mode": "structured", "languages": ["en"],
                "nodes": [{"id": "a", "kind": "open", "template": "Why?", "max_clarifications": 2, "default_target": "END"}]}"#,
        )
        .unwrap();
        assert_eq!(ilc_flow_parse(budgeted.as_ptr(), &mut f), IlcStatus::Ok);
        let mut findings = ptr::null_mut();
        assert_eq!(ilc_flow_validate(f, &mut findings), IlcStatus::ValidationError);
        let findings: serde_json::Value = serde_json::from_str(&take(findings)).unwrap();
        assert_eq!(findings.as_array().unwrap().len(), 1);
        ilc_flow_free(f);

        let mut e = ptr::null_mut();
        assert_eq!(ilc_engine_new(&mut e), IlcStatus::Ok);
        let id = CString::new("x").unwrap();
        assert_eq!(ilc_engine_add_scripted(e, id.as_ptr(), true, broken.as_ptr()), IlcStatus::ParseError);
        ilc_engine_free(e);

        assert!(!ilc_session_is_active(ptr::null()));
        ilc_session_free(ptr::null_mut());
        ilc_string_free(ptr::null_mut());
    }

    let fx = Fixture::new("crosswalk_lighting.json", None);
    assert_eq!(fx.start(Some("de")).unwrap_err(), IlcStatus::UnknownLanguage);
    let (s, first) = fx.start(Some("fr")).unwrap();
    assert_eq!(first["language"], "fr");
    unsafe {
        let bogus = CString::new("maybe").unwrap();
        let mut msg = ptr::null_mut();
        assert_eq!(ilc_session_choose(s, bogus.as_ptr(), &mut msg), IlcStatus::InvalidInput);
        let yes = CString::new("yes").unwrap();
        assert_eq!(ilc_session_choose(s, yes.as_ptr(), ptr::null_mut()), IlcStatus::NullArgument);
        ilc_session_free(s);
    }
}

#[test]
fn replay_entry_point() {
    let mut text = ptr::null_mut();
    let flow = read("expert_interview.json");
    let script = read("expert_interview.script.json");
    let status = unsafe { ilc_replay(flow.as_ptr(), script.as_ptr(), 0, &mut text) };
    assert_eq!(status, IlcStatus::Ok);
    let golden = std::fs::read_to_string(flows_dir().join("expert_interview.golden.txt")).unwrap();
    assert_eq!(unsafe { take(text) }, golden);
}

#[test]
fn header_is_generated() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/interlocutor.h")).unwrap();
    for name in ["ilc_flow_parse", "ilc_session_start", "ilc_session_restore", "ilc_string_free", "ILC_STATUS_BUSY", "typedef struct IlcSession IlcSession"] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

/// Compiles a small C program against the header and static library, when a C compiler exists.
#[test]
fn c_program_links_and_runs() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib = deps.join("libinterlocutor_ffi.a");
    if !lib.exists() {
        eprintln!("skipping: {} not built", lib.display());
        return;
    }
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("ilc_smoke");
    let status = Command::new(&cc)
        .arg(dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe)
        .arg(flows_dir().join("expert_interview.json"))
        .arg(flows_dir().join("expert_interview.script.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let golden = std::fs::read_to_string(flows_dir().join("expert_interview.golden.txt")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), golden);
}
