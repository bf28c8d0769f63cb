#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use autoskill::agent::{run_task, AgentDeps, LoopConfig, LoopError, RunStatus, ScriptedModel};
use autoskill::context::CompressionBudget;
use autoskill::session::{self, create_session, EventRecord, SessionWorkspace};
use autoskill::skill_bank::SkillBank;
use autoskill::{AgentHome, Clock, StepClock};
use chrono::{DateTime, TimeZone, Utc};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn skill_fixtures() -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(fixtures().join("skills"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    dirs.sort();
    dirs
}

pub fn script(name: &str) -> ScriptedModel {
    ScriptedModel::from_file(&fixtures().join("sessions").join(name)).unwrap()
}

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2026, 5, 7, 10, 34, 33).unwrap()
}

pub fn step_clock() -> Arc<dyn Clock> {
    Arc::new(StepClock::new(t0(), chrono::Duration::seconds(1)))
}

pub fn new_home(root: &Path) -> AgentHome {
    let home = AgentHome::new(root.join("home"));
    home.init().unwrap();
    home
}

pub fn open_bank(home: &AgentHome, clock: Arc<dyn Clock>) -> SkillBank {
    SkillBank::open(home.skills_dir(), clock).unwrap()
}

/// Every file below `dir`, keyed by relative path.
pub fn tree_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_string_lossy().into_owned(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn top_level_entries(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

/// A small budget so that a few kilobytes of tool output trigger compression.
pub fn small_budget() -> CompressionBudget {
    CompressionBudget {
        compress_token_threshold: 3_000,
        node_compress_token_threshold: 1_000,
        keep_first_turns: 2,
        keep_last_turns: 2,
    }
}

pub struct ScriptedRun {
    pub home: AgentHome,
    pub ws: SessionWorkspace,
    pub result: Result<RunStatus, LoopError>,
}

/// Creates a session named `id` and drives `model` through it.
pub fn run_scripted(
    root: &Path,
    id: &str,
    instruction: &str,
    model: &mut ScriptedModel,
    cfg: &LoopConfig,
) -> ScriptedRun {
    let home = new_home(root);
    let clock = step_clock();
    let ws = create_session(&home, instruction, &[], &[], Some(id)).unwrap();
    let mut bank = open_bank(&home, clock.clone());
    let mut deps = AgentDeps::deterministic(clock, 7);
    let result = run_task(&home, &ws, &mut bank, model, cfg, &mut deps);
    ScriptedRun { home, ws, result }
}

pub fn events(ws: &SessionWorkspace) -> Vec<EventRecord> {
    session::read_events(ws).unwrap()
}

/// `(kind, tool name)` pairs, for asserting on the shape of a trace.
pub fn trace(ws: &SessionWorkspace) -> Vec<(String, String)> {
    events(ws)
        .into_iter()
        .map(|e| {
            (
                e.kind.as_str().to_string(),
                e.payload["name"]
                    .as_str()
                    .or(e.payload["purpose"].as_str())
                    .unwrap_or("")
                    .to_string(),
            )
        })
        .collect()
}
