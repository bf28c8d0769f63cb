//! Per-session workspaces under `<home>/sessions/<session_id>/`.
//!
//! ```text
//! instruction.md          task prompt
//! submitted_inputs/       caller-supplied files
//! submitted_skillhub/     skills injected for this session only
//! result_output_files/    final artifacts
//! agent_message.md        final answer text
//! agent.stdout.txt        human-readable event log incl. token usage
//! events.jsonl            {seq, ts, kind, payload} per line
//! memory.md               session-scoped notes (memory block format)
//! ctx_state.json          AgentContext snapshot for resume
//! profile.json            wall-clock phases {setup, exec}
//! run_meta.json           reward, turn count, model, timestamps
//! ```

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clock::{rfc3339, Clock};
use crate::context::{AgentContext, CompressionBudget, ContextSnapshot};
use crate::fsutil;
use crate::home::AgentHome;
use crate::sandbox::normalize_sandbox_path;
use crate::skill_package::{self, PackageError, SkillPackage};

pub const INSTRUCTION_MD: &str = "instruction.md";
pub const SUBMITTED_INPUTS: &str = "submitted_inputs";
pub const SUBMITTED_SKILLHUB: &str = "submitted_skillhub";
pub const RESULT_OUTPUT_FILES: &str = "result_output_files";
pub const AGENT_MESSAGE_MD: &str = "agent_message.md";
pub const AGENT_STDOUT: &str = "agent.stdout.txt";
pub const EVENTS_JSONL: &str = "events.jsonl";
pub const MEMORY_MD: &str = "memory.md";
pub const CTX_STATE_JSON: &str = "ctx_state.json";
pub const PROFILE_JSON: &str = "profile.json";
pub const RUN_META_JSON: &str = "run_meta.json";

/// Every entry of a finalized workspace.
pub const WORKSPACE_ENTRIES: [&str; 11] = [
    AGENT_STDOUT,
    AGENT_MESSAGE_MD,
    CTX_STATE_JSON,
    EVENTS_JSONL,
    INSTRUCTION_MD,
    MEMORY_MD,
    PROFILE_JSON,
    RESULT_OUTPUT_FILES,
    RUN_META_JSON,
    SUBMITTED_INPUTS,
    SUBMITTED_SKILLHUB,
];

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("agent home {0} is not initialized (run `init`)")]
    HomeNotInitialized(PathBuf),
    #[error("session {0} does not exist")]
    UnknownSession(String),
    #[error("invalid session id `{0}`")]
    InvalidSessionId(String),
    #[error("session {0} has no ctx_state.json")]
    SnapshotMissing(String),
    #[error("ctx_state.json is corrupt: {0}")]
    SnapshotCorrupt(String),
    #[error("event sequence gap: expected seq {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error("events.jsonl is corrupt at line {line}: {reason}")]
    EventsCorrupt { line: usize, reason: String },
    #[error("session is already finalized")]
    AlreadyFinalized,
    #[error("output name `{0}` is not a safe relative path")]
    InvalidOutputName(String),
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error("io failure at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> SessionError {
    let path = path.into();
    move |source| SessionError::Io { path, source }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionWorkspace {
    session_id: String,
    root: PathBuf,
}

impl SessionWorkspace {
    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, entry: &str) -> PathBuf {
        self.root.join(entry)
    }

    pub fn instruction(&self) -> Result<String, SessionError> {
        let p = self.path(INSTRUCTION_MD);
        fs::read_to_string(&p).map_err(io_err(p))
    }

    pub fn is_finalized(&self) -> bool {
        self.path(RUN_META_JSON).exists()
    }

    /// Skills injected into this session.
    pub fn injected_skills(&self) -> Result<Vec<SkillPackage>, SessionError> {
        let dir = self.path(SUBMITTED_SKILLHUB);
        let mut out = Vec::new();
        if !dir.is_dir() {
            return Ok(out);
        }
        let mut entries: Vec<_> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .collect();
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            if entry.path().is_dir() {
                out.push(SkillPackage::load(&entry.path())?);
            }
        }
        Ok(out)
    }
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Creates a new workspace. `session_id` defaults to 32 random hex chars.
pub fn create_session(
    home: &AgentHome,
    instruction: &str,
    inputs: &[PathBuf],
    injected_skills: &[SkillPackage],
    session_id: Option<&str>,
) -> Result<SessionWorkspace, SessionError> {
    if !home.is_initialized() {
        return Err(SessionError::HomeNotInitialized(home.root().to_path_buf()));
    }
    let session_id = match session_id {
        Some(id) if valid_session_id(id) => id.to_string(),
        Some(id) => return Err(SessionError::InvalidSessionId(id.to_string())),
        None => fsutil::random_hex_id(),
    };
    let root = home.sessions_dir().join(&session_id);
    fs::create_dir(&root).map_err(io_err(&root))?;
    let ws = SessionWorkspace { session_id, root };
    for dir in [SUBMITTED_INPUTS, SUBMITTED_SKILLHUB, RESULT_OUTPUT_FILES] {
        fs::create_dir(ws.path(dir)).map_err(io_err(ws.path(dir)))?;
    }
    for file in [EVENTS_JSONL, AGENT_STDOUT, MEMORY_MD] {
        fs::File::create(ws.path(file)).map_err(io_err(ws.path(file)))?;
    }
    fs::write(ws.path(INSTRUCTION_MD), instruction).map_err(io_err(ws.path(INSTRUCTION_MD)))?;

    let inputs_dir = ws.path(SUBMITTED_INPUTS);
    for input in inputs {
        if input.is_dir() {
            fsutil::copy_dir(input, &inputs_dir).map_err(io_err(input))?;
        } else {
            let name = input.file_name().ok_or_else(|| SessionError::Io {
                path: input.clone(),
                source: io::Error::new(io::ErrorKind::InvalidInput, "input has no file name"),
            })?;
            fs::copy(input, inputs_dir.join(name)).map_err(io_err(input))?;
        }
    }
    for pkg in injected_skills {
        skill_package::write_skill_package(pkg, &ws.path(SUBMITTED_SKILLHUB))?;
    }
    Ok(ws)
}

/// Opens an existing workspace.
pub fn open_session(home: &AgentHome, session_id: &str) -> Result<SessionWorkspace, SessionError> {
    if !valid_session_id(session_id) {
        return Err(SessionError::InvalidSessionId(session_id.to_string()));
    }
    let root = home.sessions_dir().join(session_id);
    if !root.is_dir() {
        return Err(SessionError::UnknownSession(session_id.to_string()));
    }
    Ok(SessionWorkspace {
        session_id: session_id.to_string(),
        root,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Plan,
    ToolCall,
    Observation,
    ModelCall,
    Compression,
    FinalAnswer,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Plan => "plan",
            EventKind::ToolCall => "tool_call",
            EventKind::Observation => "observation",
            EventKind::ModelCall => "model_call",
            EventKind::Compression => "compression",
            EventKind::FinalAnswer => "final_answer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub ts: String,
    pub kind: EventKind,
    pub payload: serde_json::Value,
}

/// Writer for `events.jsonl` that enforces `seq = last + 1` and mirrors each
/// event into `agent.stdout.txt`.
#[derive(Debug)]
pub struct EventLog {
    events: PathBuf,
    stdout: PathBuf,
    last_seq: u64,
}

impl EventLog {
    pub fn open(ws: &SessionWorkspace) -> Result<Self, SessionError> {
        let last_seq = read_events(ws)?.last().map(|e| e.seq).unwrap_or(0);
        Ok(Self {
            events: ws.path(EVENTS_JSONL),
            stdout: ws.path(AGENT_STDOUT),
            last_seq,
        })
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn append(&mut self, record: &EventRecord) -> Result<(), SessionError> {
        let expected = self.last_seq + 1;
        if record.seq != expected {
            return Err(SessionError::SequenceGap {
                expected,
                got: record.seq,
            });
        }
        let mut line = serde_json::to_string(record).expect("events serialize");
        line.push('\n');
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.events)
            .map_err(io_err(&self.events))?;
        file.write_all(line.as_bytes())
            .and_then(|_| file.sync_data())
            .map_err(io_err(&self.events))?;
        fsutil::locked_append(&self.stdout, human_line(record).as_bytes())
            .map_err(io_err(&self.stdout))?;
        self.last_seq = record.seq;
        Ok(())
    }

    /// Appends the next event of `kind`, stamping seq and time.
    pub fn emit(
        &mut self,
        kind: EventKind,
        payload: serde_json::Value,
        clock: &dyn Clock,
    ) -> Result<EventRecord, SessionError> {
        let record = EventRecord {
            seq: self.last_seq + 1,
            ts: rfc3339(clock.now()),
            kind,
            payload,
        };
        self.append(&record)?;
        Ok(record)
    }
}

fn human_line(record: &EventRecord) -> String {
    let p = &record.payload;
    let detail = match record.kind {
        EventKind::ModelCall => {
            let u = &p["usage"];
            format!(
                "turn={} purpose={} attempts={} tokens fresh_in={} cached_in={} output={}",
                p["turn"],
                p["purpose"].as_str().unwrap_or("turn"),
                p["attempts"],
                u["fresh_in"],
                u["cached_in"],
                u["output"]
            )
        }
        EventKind::ToolCall => format!(
            "{} {}",
            p["name"].as_str().unwrap_or("?"),
            p["args_digest"].as_str().unwrap_or("")
        ),
        EventKind::Compression => format!(
            "level={} tokens {} -> {}",
            p["level"], p["tokens_before"], p["tokens_after"]
        ),
        _ => {
            let text = p["text"]
                .as_str()
                .or_else(|| p["message"].as_str())
                .unwrap_or("");
            let first = text.lines().next().unwrap_or("");
            let mut first: String = first.chars().take(160).collect();
            if let Some(name) = p["name"].as_str() {
                first = format!("{name}: {first}");
            }
            first
        }
    };
    format!(
        "[{:04}] {} {} {}\n",
        record.seq,
        record.ts,
        record.kind.as_str(),
        detail
    )
}

/// Appends one event, checking that it directly follows the last one on disk.
pub fn append_event(ws: &SessionWorkspace, record: &EventRecord) -> Result<(), SessionError> {
    EventLog::open(ws)?.append(record)
}

pub fn read_events(ws: &SessionWorkspace) -> Result<Vec<EventRecord>, SessionError> {
    let path = ws.path(EVENTS_JSONL);
    let file = match fs::File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(SessionError::Io { path, source: e }),
    };
    let mut out: Vec<EventRecord> = Vec::new();
    for (idx, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.is_empty() {
            continue;
        }
        let record: EventRecord =
            serde_json::from_str(&line).map_err(|e| SessionError::EventsCorrupt {
                line: idx + 1,
                reason: e.to_string(),
            })?;
        if let Some(prev) = out.last() {
            if record.seq <= prev.seq {
                return Err(SessionError::EventsCorrupt {
                    line: idx + 1,
                    reason: "seq not increasing".into(),
                });
            }
        }
        out.push(record);
    }
    Ok(out)
}

/// Drops events whose `payload.turn` is greater than `turn`: the tail of a
/// turn that was interrupted before its snapshot was written. Returns the
/// number of events removed.
pub fn discard_events_after_turn(
    ws: &SessionWorkspace,
    turn: usize,
) -> Result<usize, SessionError> {
    let events = read_events(ws)?;
    let keep: Vec<&EventRecord> = events
        .iter()
        .filter(|e| {
            e.payload
                .get("turn")
                .and_then(serde_json::Value::as_u64)
                .is_none_or(|t| t as usize <= turn)
        })
        .collect();
    let removed = events.len() - keep.len();
    if removed > 0 {
        let mut text = String::new();
        for e in keep {
            text.push_str(&serde_json::to_string(e).expect("events serialize"));
            text.push('\n');
        }
        let path = ws.path(EVENTS_JSONL);
        fsutil::atomic_write(&path, text.as_bytes()).map_err(io_err(path))?;
    }
    Ok(removed)
}

/// Writes `ctx_state.json` via temp file + rename.
pub fn persist_snapshot(ws: &SessionWorkspace, ctx: &AgentContext) -> Result<(), SessionError> {
    let json = serde_json::to_vec_pretty(&ctx.to_snapshot()).expect("snapshot serializes");
    let path = ws.path(CTX_STATE_JSON);
    fsutil::atomic_write(&path, &json).map_err(io_err(path))
}

pub fn load_snapshot(
    ws: &SessionWorkspace,
    budget: CompressionBudget,
) -> Result<AgentContext, SessionError> {
    let path = ws.path(CTX_STATE_JSON);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(SessionError::SnapshotMissing(ws.session_id.clone()))
        }
        Err(e) => return Err(SessionError::Io { path, source: e }),
    };
    let snapshot: ContextSnapshot =
        serde_json::from_slice(&bytes).map_err(|e| SessionError::SnapshotCorrupt(e.to_string()))?;
    AgentContext::from_snapshot(snapshot, budget)
        .map_err(|e| SessionError::SnapshotCorrupt(e.to_string()))
}

/// Loads a workspace and its context for continuation.
pub fn resume_session(
    home: &AgentHome,
    session_id: &str,
    budget: CompressionBudget,
) -> Result<(SessionWorkspace, AgentContext), SessionError> {
    let ws = open_session(home, session_id).map_err(|e| match e {
        SessionError::UnknownSession(id) => SessionError::SnapshotMissing(id),
        other => other,
    })?;
    let ctx = load_snapshot(&ws, budget)?;
    Ok((ws, ctx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    /// Verifier reward in `[0, 1]`, when one was assigned.
    pub reward: Option<f64>,
    /// Whether the run ended with an accepted final answer.
    #[serde(default)]
    pub success: Option<bool>,
    pub turn_count: usize,
    pub model: String,
    pub started: String,
    pub finished: String,
}

impl RunMeta {
    pub fn succeeded(&self) -> bool {
        self.reward.map(|r| r > 0.0).unwrap_or(false) || self.success == Some(true)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub setup: f64,
    pub exec: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputFile {
    /// Path relative to `result_output_files/`.
    pub name: String,
    pub bytes: Vec<u8>,
}

pub fn read_run_meta(ws: &SessionWorkspace) -> Result<Option<RunMeta>, SessionError> {
    let path = ws.path(RUN_META_JSON);
    match fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| SessionError::Io {
                path,
                source: io::Error::new(io::ErrorKind::InvalidData, e),
            }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(SessionError::Io { path, source: e }),
    }
}

/// Writes the closing artifacts. A workspace can be finalized once.
pub fn finalize_session(
    ws: &SessionWorkspace,
    final_message: &str,
    outputs: &[OutputFile],
    meta: &RunMeta,
    profile: &Profile,
) -> Result<(), SessionError> {
    if ws.is_finalized() {
        return Err(SessionError::AlreadyFinalized);
    }
    let out_dir = ws.path(RESULT_OUTPUT_FILES);
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    for out in outputs {
        let rel = normalize_sandbox_path(&out.name)
            .ok()
            .filter(|r| !r.as_os_str().is_empty() && !Path::new(&out.name).is_absolute())
            .ok_or_else(|| SessionError::InvalidOutputName(out.name.clone()))?;
        let dest = out_dir.join(rel);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&dest, &out.bytes).map_err(io_err(&dest))?;
    }
    fs::write(ws.path(AGENT_MESSAGE_MD), final_message)
        .map_err(io_err(ws.path(AGENT_MESSAGE_MD)))?;
    let profile_json = serde_json::to_vec_pretty(profile).expect("profile serializes");
    fsutil::atomic_write(&ws.path(PROFILE_JSON), &profile_json)
        .map_err(io_err(ws.path(PROFILE_JSON)))?;
    let meta_json = serde_json::to_vec_pretty(meta).expect("run meta serializes");
    fsutil::atomic_write(&ws.path(RUN_META_JSON), &meta_json)
        .map_err(io_err(ws.path(RUN_META_JSON)))?;
    Ok(())
}
