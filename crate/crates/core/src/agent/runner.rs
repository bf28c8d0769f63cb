use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::model::{ModelClient, ModelError, ModelRequest, ModelResponse, Purpose};
use super::retry::{
    call_model_with_retry, RecordingSleeper, RetryError, RetryPolicy, Sleeper, ThreadSleeper,
};
use super::tools::{run_handler, truncate_tool_output, ToolRegistry};
use super::{ConfigError, LoopConfig};
use crate::clock::{rfc3339, Clock};
use crate::context::{maybe_compress_history, CompressionLevel, SummarizeError, Summarizer};
use crate::context::{AgentContext, ContextError, ToolCall, TurnPayload};
use crate::home::AgentHome;
use crate::lifecycle::{run_pipeline, PipelineOptions, PipelineSource, SkillSpec};
use crate::memory::{self, MemoryTier};
use crate::sandbox::{
    self, normalize_sandbox_path, ExecResult, LocalProcessFactory, Sandbox, SandboxFactory,
};
use crate::session::{
    self, finalize_session, persist_snapshot, EventKind, EventLog, OutputFile, Profile, RunMeta,
    SessionError, SessionWorkspace, SUBMITTED_INPUTS, SUBMITTED_SKILLHUB,
};
use crate::skill_bank::{BankError, Outcome, SkillBank};
use crate::skill_package::{SkillPackage, MEMORY_FILE};

const SYSTEM_PROMPT_TEMPLATE: &str = include_str!("../../resources/system_prompt.md");

const VERIFY_SYSTEM: &str = "You check whether an agent has completed its task. Reply with JSON \
{\"complete\": true|false, \"reason\": \"...\"}.";

const SUMMARY_SYSTEM: &str =
    "Summarize the following conversation turns. Keep facts, file names, decisions and open \
problems; drop verbatim tool output.";

/// One document of the canned `web_search` corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SearchDoc {
    pub title: String,
    pub url: String,
    pub snippet: String,
}

/// Final message and output files of an accepted answer.
type AcceptedAnswer = (String, Vec<OutputFile>);

/// Everything the loop needs besides the session, bank and model.
pub struct AgentDeps {
    pub clock: Arc<dyn Clock>,
    pub sandbox_factory: Arc<dyn SandboxFactory>,
    pub sleeper: Box<dyn Sleeper>,
    pub rng: Box<dyn RngCore + Send>,
    pub registry: ToolRegistry,
    /// `None` makes `web_search` report itself unavailable.
    pub search_corpus: Option<Vec<SearchDoc>>,
}

impl AgentDeps {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            clock,
            sandbox_factory: Arc::new(LocalProcessFactory::default()),
            sleeper: Box::new(ThreadSleeper),
            rng: Box::new(StdRng::from_os_rng()),
            registry: ToolRegistry::with_builtins(),
            search_corpus: None,
        }
    }

    /// Seeded jitter and sleeps that return immediately.
    pub fn deterministic(clock: Arc<dyn Clock>, seed: u64) -> Self {
        Self {
            sleeper: Box::new(RecordingSleeper::default()),
            rng: Box::new(StdRng::seed_from_u64(seed)),
            ..Self::new(clock)
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoopError {
    #[error("turn {turn}: model call failed after {attempts} attempts: {last}")]
    ModelExhaustedRetries {
        turn: usize,
        attempts: u32,
        last: ModelError,
    },
    #[error("turn {turn}: {error}")]
    ModelPermanentFailure { turn: usize, error: ModelError },
    #[error("loop aborted: {0}")]
    LoopAborted(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl From<BankError> for LoopError {
    fn from(e: BankError) -> Self {
        LoopError::LoopAborted(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Finished(RunMeta),
    /// Stopped at `stop_after_turns`; resume to continue.
    Paused {
        turn_count: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    Accept,
    ForceVerify,
}

/// Early answers (turn below the threshold) must pass `verify_completion`.
pub fn gate_final_answer(turn_index: usize, cfg: &LoopConfig) -> GateDecision {
    if turn_index < cfg.verify_completion_turn_threshold {
        GateDecision::ForceVerify
    } else {
        GateDecision::Accept
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verification {
    pub complete: bool,
    pub reason: String,
}

/// Reads `{"complete": bool, "reason": ...}`, or failing that a reply that
/// starts with "complete" / "incomplete".
pub fn parse_verification(text: &str) -> Verification {
    let trimmed = text
        .trim()
        .trim_start_matches("```json")
        .trim_start_matches("```")
        .trim_end_matches("```")
        .trim();
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        if let Some(complete) = v["complete"].as_bool() {
            return Verification {
                complete,
                reason: v["reason"].as_str().unwrap_or_default().to_string(),
            };
        }
    }
    let lower = trimmed.to_ascii_lowercase();
    Verification {
        complete: lower.starts_with("complete") || lower.starts_with("yes"),
        reason: trimmed.to_string(),
    }
}

fn find_injected<'p>(injected: &'p [SkillPackage], name: &str) -> Option<&'p SkillPackage> {
    injected.iter().find(|p| p.name() == name)
}

fn render_skill(pkg: &SkillPackage, memory: &str) -> String {
    let memory = if memory.trim().is_empty() {
        "(empty)"
    } else {
        memory.trim_end()
    };
    format!(
        "{}\n--- skill memory ---\n{}\n",
        pkg.skill_md.render().trim_end(),
        memory
    )
}

/// Loads a skill (session-injected skills shadow bank skills of the same
/// name) and renders its SKILL.md followed by its memory.
pub fn execute_skill(
    ws: &SessionWorkspace,
    bank: &SkillBank,
    name: &str,
) -> Result<String, BankError> {
    let injected = ws.injected_skills().map_err(|e| BankError::Io {
        path: ws.root().to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })?;
    execute_skill_in(&injected, bank, name)
}

fn execute_skill_in(
    injected: &[SkillPackage],
    bank: &SkillBank,
    name: &str,
) -> Result<String, BankError> {
    if let Some(pkg) = find_injected(injected, name) {
        let memory = memory::read_text(&pkg.root().join(MEMORY_FILE)).unwrap_or_default();
        return Ok(render_skill(pkg, &memory));
    }
    let resolved = bank.resolve_skill(name)?;
    Ok(render_skill(&resolved.package, &resolved.memory))
}

fn args_digest(args: &Value) -> String {
    hex::encode(Sha256::digest(args.to_string().as_bytes()))
}

fn format_exec(r: &ExecResult, timeout: Duration) -> String {
    let mut s = String::new();
    if r.timed_out {
        s.push_str(&format!(
            "timed out after {}s; process killed\n",
            timeout.as_secs_f64()
        ));
    }
    s.push_str(&format!("exit_code: {}\n", r.exit_code));
    for (label, text) in [("stdout", &r.stdout), ("stderr", &r.stderr)] {
        if !text.is_empty() {
            s.push_str(label);
            s.push_str(":\n");
            s.push_str(text);
            if !text.ends_with('\n') {
                s.push('\n');
            }
        }
    }
    s
}

fn str_arg<'v>(args: &'v Value, key: &str) -> Result<&'v str, String> {
    args.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| format!("missing string argument `{key}`"))
}

/// The model as seen from inside a run: retries, and one `model_call` event
/// per logical call.
struct ModelPort<'a> {
    model: &'a mut dyn ModelClient,
    sleeper: &'a mut dyn Sleeper,
    rng: &'a mut (dyn RngCore + Send),
    log: &'a mut EventLog,
    clock: &'a dyn Clock,
    policy: RetryPolicy,
    turn: usize,
    io_error: Option<SessionError>,
}

impl ModelPort<'_> {
    fn call(&mut self, request: &ModelRequest) -> Result<ModelResponse, RetryError> {
        let result =
            call_model_with_retry(self.model, request, &self.policy, self.sleeper, self.rng);
        let mut payload = json!({"turn": self.turn, "purpose": request.purpose.as_str()});
        match &result {
            Ok(out) => {
                payload["attempts"] = json!(out.attempts);
                payload["usage"] = json!(out.response.usage);
            }
            Err(RetryError::ExhaustedRetries { attempts, last }) => {
                payload["attempts"] = json!(attempts);
                payload["error"] = json!(last.message);
            }
            Err(RetryError::Permanent(e)) => {
                payload["attempts"] = json!(1);
                payload["error"] = json!(e.message);
            }
        }
        if let Err(e) = self.log.emit(EventKind::ModelCall, payload, self.clock) {
            self.io_error.get_or_insert(e);
        }
        result.map(|o| o.response)
    }

    fn finish(self) -> Result<(), LoopError> {
        self.io_error.map_or(Ok(()), |e| Err(e.into()))
    }
}

impl ModelClient for ModelPort<'_> {
    fn model_id(&self) -> String {
        self.model.model_id()
    }

    fn complete(&mut self, request: &ModelRequest) -> Result<ModelResponse, ModelError> {
        let mut request = request.clone();
        request.turn_index = self.turn;
        self.call(&request).map_err(|e| match e {
            RetryError::Permanent(e) => e,
            other => ModelError::permanent(other.to_string()),
        })
    }
}

struct ModelSummarizer<'p, 'a> {
    port: &'p mut ModelPort<'a>,
    timeout: Duration,
}

impl Summarizer for ModelSummarizer<'_, '_> {
    fn summarize(&mut self, payloads: &[String]) -> Result<String, SummarizeError> {
        let request =
            ModelRequest::new(Purpose::Summarize, SUMMARY_SYSTEM, "Summarize these turns.")
                .with_messages(payloads.to_vec())
                .with_turn(self.port.turn)
                .with_timeout(self.timeout);
        self.port
            .call(&request)
            .map(|r| r.text)
            .map_err(|e| SummarizeError(e.to_string()))
    }
}

macro_rules! port {
    ($run:expr, $turn:expr) => {
        ModelPort {
            model: &mut *$run.model,
            sleeper: &mut *$run.deps.sleeper,
            rng: &mut *$run.deps.rng,
            log: &mut $run.log,
            clock: &*$run.deps.clock,
            policy: $run.cfg.retry_policy(),
            turn: $turn,
            io_error: None,
        }
    };
}

struct Run<'a> {
    home: &'a AgentHome,
    ws: &'a SessionWorkspace,
    bank: &'a mut SkillBank,
    model: &'a mut dyn ModelClient,
    cfg: &'a LoopConfig,
    deps: &'a mut AgentDeps,
    ctx: AgentContext,
    log: EventLog,
    instruction: String,
    injected: Vec<SkillPackage>,
    sandboxes: BTreeMap<String, Box<dyn Sandbox>>,
    sandbox_counter: usize,
    used_skills: BTreeSet<String>,
    failed_skills: BTreeSet<String>,
    scratch: PathBuf,
    started: Instant,
    first_model_call: Option<Instant>,
}

/// Extra observation-event fields used to rebuild run state on resume.
type Extra = Vec<(&'static str, Value)>;

impl Run<'_> {
    fn emit(&mut self, kind: EventKind, payload: Value) -> Result<(), LoopError> {
        self.log.emit(kind, payload, &*self.deps.clock)?;
        Ok(())
    }

    fn system_prompt(&self) -> String {
        let catalog = self
            .bank
            .build_catalog()
            .with_session_skills(&self.injected)
            .to_yaml();
        let catalog = if catalog.is_empty() {
            "(no skills registered yet)\n".to_string()
        } else {
            catalog
        };
        let tools: String = self
            .deps
            .registry
            .schemas()
            .iter()
            .map(|t| {
                format!(
                    "- {}: {} arguments: {}\n",
                    t.name, t.description, t.parameters
                )
            })
            .collect();
        let read = |p: PathBuf| {
            let t = memory::read_text(&p).unwrap_or_default();
            if t.trim().is_empty() {
                "(empty)".to_string()
            } else {
                t.trim_end().to_string()
            }
        };
        SYSTEM_PROMPT_TEMPLATE
            .replace(
                "{{verify_threshold}}",
                &self.cfg.verify_completion_turn_threshold.to_string(),
            )
            .replace("{{catalog}}", &catalog)
            .replace("{{tools}}", &tools)
            .replace("{{long_term_memory}}", &read(self.home.long_term_memory()))
            .replace(
                "{{session_memory}}",
                &read(self.ws.path(session::MEMORY_MD)),
            )
    }

    fn chain_texts(&self) -> Result<Vec<String>, LoopError> {
        Ok(self
            .ctx
            .active_chain()
            .map_err(|e| LoopError::LoopAborted(e.to_string()))?
            .into_iter()
            .map(|e| e.text)
            .collect())
    }

    fn drive(&mut self) -> Result<RunStatus, LoopError> {
        let result = self.drive_inner();
        for (_, mut sbx) in std::mem::take(&mut self.sandboxes) {
            sbx.close();
        }
        result
    }

    fn drive_inner(&mut self) -> Result<RunStatus, LoopError> {
        loop {
            let done = self.ctx.turn_count();
            if let Some(stop) = self.cfg.stop_after_turns {
                if done >= stop {
                    return Ok(RunStatus::Paused { turn_count: done });
                }
            }
            if done >= self.cfg.max_turns {
                let message =
                    format!("stopped after {done} turns without an accepted final answer");
                return self.finish(message, Vec::new(), false);
            }
            let turn = done + 1;
            self.compress(turn)?;

            let request = ModelRequest {
                purpose: Purpose::Turn,
                turn_index: turn,
                system_prompt: self.system_prompt(),
                instruction: self.instruction.clone(),
                messages: self.chain_texts()?,
                tools: self.deps.registry.schemas(),
                timeout: self.cfg.model_timeout,
            };
            self.first_model_call.get_or_insert_with(Instant::now);
            let mut port = port!(self, turn);
            let result = port.call(&request);
            port.finish()?;
            let response = result.map_err(|e| match e {
                RetryError::ExhaustedRetries { attempts, last } => {
                    LoopError::ModelExhaustedRetries {
                        turn,
                        attempts,
                        last,
                    }
                }
                RetryError::Permanent(error) => LoopError::ModelPermanentFailure { turn, error },
            })?;
            self.emit(
                EventKind::Plan,
                json!({"turn": turn, "text": response.text}),
            )?;

            let mut payload = TurnPayload {
                response: response.text.clone(),
                usage: response.usage,
                ..Default::default()
            };
            let mut accepted: Option<(String, Vec<OutputFile>)> = None;
            for call in &response.tool_calls {
                payload.tool_calls.push(call.clone());
                self.emit(
                    EventKind::ToolCall,
                    json!({"turn": turn, "name": call.name, "args_digest": args_digest(&call.arguments), "arguments": call.arguments}),
                )?;
                let (text, extra) = if call.name == "final_answer"
                    && self.deps.registry.is_builtin("final_answer")
                {
                    let (text, answer) = self.final_answer(turn, call, &mut payload)?;
                    accepted = answer;
                    (text, Vec::new())
                } else {
                    self.dispatch(turn, call)?
                };
                self.observe(turn, &call.name, text, extra, &mut payload)?;
                if let Some((message, outputs)) = &accepted {
                    let names: Vec<&str> = outputs.iter().map(|o| o.name.as_str()).collect();
                    self.emit(
                        EventKind::FinalAnswer,
                        json!({"turn": turn, "message": message, "outputs": names}),
                    )?;
                    break;
                }
            }
            self.ctx.append_turn(payload);
            persist_snapshot(self.ws, &self.ctx)?;
            if let Some((message, outputs)) = accepted {
                return self.finish(message, outputs, true);
            }
        }
    }

    fn observe(
        &mut self,
        turn: usize,
        name: &str,
        text: String,
        extra: Extra,
        payload: &mut TurnPayload,
    ) -> Result<(), LoopError> {
        let text = truncate_tool_output(&text, self.cfg.tool_text_limit);
        let mut event = json!({"turn": turn, "name": name, "text": text});
        for (k, v) in extra {
            event[k] = v;
        }
        self.emit(EventKind::Observation, event)?;
        payload.observations.push(text);
        Ok(())
    }

    fn compress(&mut self, turn: usize) -> Result<(), LoopError> {
        let timeout = self.cfg.model_timeout;
        let mut port = port!(self, turn);
        let result = maybe_compress_history(
            &mut self.ctx,
            &mut ModelSummarizer {
                port: &mut port,
                timeout,
            },
        );
        port.finish()?;
        let event = match result {
            Ok(r) if r.level == CompressionLevel::Untouched => return Ok(()),
            Ok(r) => {
                let mut v = serde_json::to_value(&r).expect("report serializes");
                v.as_object_mut().expect("object").remove("summary_node");
                v["turn"] = json!(turn);
                v
            }
            Err(ContextError::ChainTooShort { len, pinned }) => json!({
                "turn": turn, "level": "skipped",
                "reason": format!("over budget but only {len} turns (pinned {pinned})"),
            }),
            Err(ContextError::Summarizer(reason)) => {
                json!({"turn": turn, "level": "failed", "reason": reason})
            }
            Err(e) => return Err(LoopError::LoopAborted(e.to_string())),
        };
        if result_was_compressed(&event) {
            persist_snapshot(self.ws, &self.ctx)?;
        }
        self.emit(EventKind::Compression, event)
    }

    fn verify(&mut self, turn: usize, summary: &str) -> Result<Verification, LoopError> {
        let mut messages = self.chain_texts()?;
        messages.push(format!("Proposed completion: {summary}"));
        let request = ModelRequest::new(Purpose::Verify, VERIFY_SYSTEM, self.instruction.clone())
            .with_messages(messages)
            .with_turn(turn)
            .with_timeout(self.cfg.verify_completion_timeout);
        let mut port = port!(self, turn);
        let result = port.call(&request);
        port.finish()?;
        Ok(match result {
            Ok(r) => parse_verification(&r.text),
            Err(e) => Verification {
                complete: false,
                reason: format!("verification failed: {e}"),
            },
        })
    }

    fn verification_text(v: &Verification) -> String {
        format!(
            "verification: {} - {}",
            if v.complete { "complete" } else { "incomplete" },
            v.reason
        )
    }

    fn resolve_outputs(&self, args: &Value) -> Result<Vec<OutputFile>, String> {
        let mut out = Vec::new();
        for item in args
            .get("outputs")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
        {
            let name = str_arg(item, "name")?.to_string();
            let bytes = if let Some(content) = item.get("content").and_then(Value::as_str) {
                content.as_bytes().to_vec()
            } else {
                let id = str_arg(item, "sandbox")?;
                let path = str_arg(item, "path")?;
                let sbx = self
                    .sandboxes
                    .get(id)
                    .ok_or_else(|| format!("unknown sandbox {id}"))?;
                sbx.download(path).map_err(|e| e.to_string())?
            };
            out.push(OutputFile { name, bytes });
        }
        Ok(out)
    }

    /// Handles `final_answer`, forcing a verification first when the gate
    /// requires it. Returns the observation and the accepted answer, if any.
    fn final_answer(
        &mut self,
        turn: usize,
        call: &ToolCall,
        payload: &mut TurnPayload,
    ) -> Result<(String, Option<AcceptedAnswer>), LoopError> {
        let message = match str_arg(&call.arguments, "message") {
            Ok(m) => m.to_string(),
            Err(e) => return Ok((format!("error: {e}"), None)),
        };
        let outputs = match self.resolve_outputs(&call.arguments) {
            Ok(o) => o,
            Err(e) => return Ok((format!("error: final answer rejected: {e}"), None)),
        };
        if gate_final_answer(turn, self.cfg) == GateDecision::ForceVerify {
            let vcall = ToolCall {
                name: "verify_completion".into(),
                arguments: json!({"summary": message}),
            };
            self.emit(
                EventKind::ToolCall,
                json!({"turn": turn, "name": vcall.name, "args_digest": args_digest(&vcall.arguments), "arguments": vcall.arguments, "forced": true}),
            )?;
            payload.tool_calls.push(vcall);
            let v = self.verify(turn, &message)?;
            self.observe(
                turn,
                "verify_completion",
                Self::verification_text(&v),
                vec![("complete", json!(v.complete))],
                payload,
            )?;
            if !v.complete {
                return Ok((
                    format!(
                        "final answer rejected: verification reported the task incomplete: {}",
                        v.reason
                    ),
                    None,
                ));
            }
        }
        Ok((
            "final answer accepted".to_string(),
            Some((message, outputs)),
        ))
    }

    fn dispatch(&mut self, turn: usize, call: &ToolCall) -> Result<(String, Extra), LoopError> {
        if !self.deps.registry.contains(&call.name) {
            return Ok((format!("error: unknown tool {}", call.name), Vec::new()));
        }
        if let Some(handler) = self.deps.registry.handler(&call.name) {
            let timeout = self
                .deps
                .registry
                .spec(&call.name)
                .expect("registered")
                .timeout_class
                .duration(self.cfg);
            return Ok((
                run_handler(&call.name, handler, &call.arguments, timeout),
                Vec::new(),
            ));
        }
        let args = &call.arguments;
        let mut extra = Vec::new();
        let result: Result<String, String> = match call.name.as_str() {
            "skill_create" => self.skill_create(turn, args)?,
            "web_search" => self.web_search(args),
            "read_skill" => match str_arg(args, "name") {
                Ok(name) => match execute_skill_in(&self.injected, self.bank, name) {
                    Ok(text) => {
                        self.used_skills.insert(name.to_string());
                        extra.push(("skill", json!(name)));
                        Ok(text)
                    }
                    Err(e) => Err(e.to_string()),
                },
                Err(e) => Err(e),
            },
            "terminal" => self.terminal(args),
            "create_sandbox" => {
                self.sandbox_counter += 1;
                let id = format!("sbx-{}", self.sandbox_counter);
                match self.deps.sandbox_factory.create_sandbox() {
                    Ok(sbx) => {
                        self.sandboxes.insert(id.clone(), sbx);
                        Ok(format!("created sandbox {id}; working directory /sandbox with inputs/ and outputs/"))
                    }
                    Err(e) => Err(e.to_string()),
                }
            }
            "sandbox_run" => self.sandbox_run(args, &mut extra),
            "sandbox_upload" => self.sandbox_upload(args),
            "sandbox_download" => self.with_sandbox(args, |sbx, args| {
                let path = str_arg(args, "path")?;
                let bytes = sbx.download(path).map_err(|e| e.to_string())?;
                Ok(String::from_utf8_lossy(&bytes).into_owned())
            }),
            "close_sandbox" => match str_arg(args, "sandbox") {
                Ok(id) => match self.sandboxes.remove(id) {
                    Some(mut sbx) => {
                        sbx.close();
                        Ok(format!("closed sandbox {id}"))
                    }
                    None => Err(format!("unknown sandbox {id}")),
                },
                Err(e) => Err(e),
            },
            "verify_completion" => {
                let summary = args
                    .get("summary")
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_string();
                let v = self.verify(turn, &summary)?;
                extra.push(("complete", json!(v.complete)));
                Ok(Self::verification_text(&v))
            }
            "memory_append" => self.memory_append(args),
            other => Err(format!("tool {other} has no handler")),
        };
        Ok((result.unwrap_or_else(|e| format!("error: {e}")), extra))
    }

    fn skill_create(
        &mut self,
        turn: usize,
        args: &Value,
    ) -> Result<Result<String, String>, LoopError> {
        let spec: SkillSpec = match serde_json::from_value(args.clone()) {
            Ok(s) => s,
            Err(e) => return Ok(Err(format!("invalid skill spec: {e}"))),
        };
        let factory = self.deps.sandbox_factory.clone();
        let staging = self.home.staging_dir();
        let opts = PipelineOptions {
            max_rounds: self.cfg.max_refine_rounds,
            test_timeout: self.cfg.exec_code_timeout,
        };
        let mut port = port!(self, turn);
        let result = run_pipeline(
            PipelineSource::Spec(&spec),
            &mut port,
            &*factory,
            self.bank,
            &staging,
            opts,
        );
        port.finish()?;
        Ok(match result {
            Ok(outcome) => {
                Ok(serde_json::to_string_pretty(&outcome.summary()).expect("summary serializes"))
            }
            Err(e) => Err(e.to_string()),
        })
    }

    fn web_search(&self, args: &Value) -> Result<String, String> {
        let query = str_arg(args, "query")?.to_lowercase();
        let Some(corpus) = &self.deps.search_corpus else {
            return Ok("web_search unavailable: no search backend is configured".to_string());
        };
        let words: Vec<&str> = query.split_whitespace().collect();
        let hits: Vec<&SearchDoc> = corpus
            .iter()
            .filter(|d| {
                let hay = format!("{} {}", d.title, d.snippet).to_lowercase();
                words.iter().any(|w| hay.contains(w))
            })
            .collect();
        if hits.is_empty() {
            return Ok(format!("no results for `{query}`"));
        }
        Ok(hits
            .iter()
            .map(|d| format!("{}\n{}\n{}\n", d.title, d.url, d.snippet))
            .collect::<Vec<_>>()
            .join("\n"))
    }

    fn terminal(&self, args: &Value) -> Result<String, String> {
        let command = str_arg(args, "command")?;
        fs::create_dir_all(&self.scratch).map_err(|e| e.to_string())?;
        let mut cmd = Command::new("/bin/sh");
        cmd.arg("-c")
            .arg(command)
            .current_dir(&self.scratch)
            .env("INPUTS_DIR", self.ws.path(SUBMITTED_INPUTS))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        let r =
            sandbox::run_with_timeout(cmd, self.cfg.terminal_timeout).map_err(|e| e.to_string())?;
        Ok(format_exec(&r, self.cfg.terminal_timeout))
    }

    fn with_sandbox(
        &mut self,
        args: &Value,
        f: impl FnOnce(&mut dyn Sandbox, &Value) -> Result<String, String>,
    ) -> Result<String, String> {
        let id = str_arg(args, "sandbox")?;
        let sbx = self
            .sandboxes
            .get_mut(id)
            .ok_or_else(|| format!("unknown sandbox {id}"))?;
        f(sbx.as_mut(), args)
    }

    fn sandbox_run(&mut self, args: &Value, extra: &mut Extra) -> Result<String, String> {
        let timeout = args
            .get("timeout_seconds")
            .and_then(Value::as_u64)
            .map(Duration::from_secs)
            .filter(|d| !d.is_zero())
            .unwrap_or(self.cfg.exec_code_timeout);
        let command = str_arg(args, "command")?.to_string();
        let r = self.with_sandbox(args, |sbx, _| {
            sbx.run(&command, timeout)
                .map(|r| (r.exit_code, r.timed_out, format_exec(&r, timeout)))
                .map(|t| serde_json::to_string(&t).unwrap())
                .map_err(|e| e.to_string())
        })?;
        let (exit_code, timed_out, mut text): (i32, bool, String) =
            serde_json::from_str(&r).expect("tuple round-trips");
        if exit_code != 0 || timed_out {
            let failed: Vec<String> = self
                .used_skills
                .iter()
                .filter(|n| command.contains(&format!("skills/{n}")))
                .cloned()
                .collect();
            for name in failed {
                if self.bank.contains(&name) && self.failed_skills.insert(name.clone()) {
                    self.bank
                        .record_usage(&name, self.ws.session_id(), Outcome::Failure)
                        .map_err(|e| e.to_string())?;
                }
                extra.push(("skill_failed", json!(name)));
                text.push_str(&format!(
                    "note: skill `{name}` failed; you can record what went wrong with memory_append {{\"tier\": \"skill\", \"skill\": \"{name}\", \"content\": ...}}\n"
                ));
            }
        }
        Ok(text)
    }

    fn sandbox_upload(&mut self, args: &Value) -> Result<String, String> {
        let source = str_arg(args, "source")?.to_string();
        let dest = args.get("dest").and_then(Value::as_str).map(str::to_string);
        let (host, is_dir, default_dest) = if let Some(name) = source.strip_prefix("skill:") {
            let root = match find_injected(&self.injected, name) {
                Some(p) => p.root().to_path_buf(),
                None if self.bank.contains(name) => self.bank.skill_dir(name),
                None => return Err(format!("unknown skill `{name}`")),
            };
            (root, true, Some(format!("skills/{name}")))
        } else {
            let rel = normalize_sandbox_path(&source)
                .map_err(|_| format!("`{source}` escapes the session workspace"))?;
            if Path::new(&source).is_absolute() || rel.as_os_str().is_empty() {
                return Err(format!(
                    "`{source}` must be a path relative to the session workspace"
                ));
            }
            (self.ws.root().join(rel), false, None)
        };
        self.with_sandbox(args, |sbx, _| {
            let placed = if is_dir {
                let dest = dest.or(default_dest).expect("skill uploads have a default");
                sbx.upload_dir(&host, &dest, &|rel| rel == Path::new(MEMORY_FILE))
            } else {
                sbx.upload(&host, dest.as_deref())
            }
            .map_err(|e| e.to_string())?;
            Ok(format!("uploaded {source} to /sandbox/{placed}"))
        })
    }

    fn memory_append(&mut self, args: &Value) -> Result<String, String> {
        let content = str_arg(args, "content")?;
        let tier = str_arg(args, "tier")?;
        let path = match tier {
            "long_term" => MemoryTier::LongTerm.path(self.home),
            "session" => self.ws.path(session::MEMORY_MD),
            "skill" => {
                let name = str_arg(args, "skill")?;
                if find_injected(&self.injected, name).is_some() {
                    self.ws
                        .path(SUBMITTED_SKILLHUB)
                        .join(name)
                        .join(MEMORY_FILE)
                } else if self.bank.contains(name) {
                    self.bank.skill_dir(name).join(MEMORY_FILE)
                } else {
                    return Err(format!("unknown skill `{name}`"));
                }
            }
            other => return Err(format!("unknown memory tier `{other}`")),
        };
        memory::append_block(&path, content, &*self.deps.clock).map_err(|e| e.to_string())?;
        Ok(format!("appended to {tier} memory"))
    }

    fn finish(
        &mut self,
        message: String,
        outputs: Vec<OutputFile>,
        success: bool,
    ) -> Result<RunStatus, LoopError> {
        for name in self.used_skills.clone() {
            if self.bank.contains(&name) && !self.failed_skills.contains(&name) {
                let outcome = if success {
                    Outcome::Success
                } else {
                    Outcome::Failure
                };
                self.bank
                    .record_usage(&name, self.ws.session_id(), outcome)?;
            }
        }
        let events = session::read_events(self.ws)?;
        let now = rfc3339(self.deps.clock.now());
        let meta = RunMeta {
            reward: None,
            success: Some(success),
            turn_count: self.ctx.turn_count(),
            model: self.model.model_id(),
            started: events
                .first()
                .map(|e| e.ts.clone())
                .unwrap_or_else(|| now.clone()),
            finished: now,
        };
        let first_call = self.first_model_call.unwrap_or(self.started);
        let profile = Profile {
            setup: first_call.duration_since(self.started).as_secs_f64(),
            exec: first_call.elapsed().as_secs_f64(),
        };
        finalize_session(self.ws, &message, &outputs, &meta, &profile)?;
        let _ = fs::remove_dir_all(&self.scratch);
        Ok(RunStatus::Finished(meta))
    }
}

fn result_was_compressed(event: &Value) -> bool {
    matches!(event["level"].as_str(), Some("level1" | "level2"))
}

fn scratch_dir(home: &AgentHome, ws: &SessionWorkspace) -> PathBuf {
    home.root().join("scratch").join(ws.session_id())
}

/// Runs (or continues) the loop for `ws` until an answer is accepted, the
/// turn cap is hit, or `cfg.stop_after_turns` pauses it.
pub fn run_task(
    home: &AgentHome,
    ws: &SessionWorkspace,
    bank: &mut SkillBank,
    model: &mut dyn ModelClient,
    cfg: &LoopConfig,
    deps: &mut AgentDeps,
) -> Result<RunStatus, LoopError> {
    cfg.validate()?;
    if ws.is_finalized() {
        return Err(SessionError::AlreadyFinalized.into());
    }
    let ctx = if ws.path(session::CTX_STATE_JSON).exists() {
        session::load_snapshot(ws, cfg.budget)?
    } else {
        AgentContext::new(cfg.budget)
    };
    start(home, ws, bank, model, cfg, deps, ctx)
}

/// Continues a paused or interrupted session from its snapshot.
pub fn resume_task(
    home: &AgentHome,
    session_id: &str,
    bank: &mut SkillBank,
    model: &mut dyn ModelClient,
    cfg: &LoopConfig,
    deps: &mut AgentDeps,
) -> Result<RunStatus, LoopError> {
    cfg.validate()?;
    let (ws, ctx) = session::resume_session(home, session_id, cfg.budget)?;
    if ws.is_finalized() {
        return Err(SessionError::AlreadyFinalized.into());
    }
    start(home, &ws, bank, model, cfg, deps, ctx)
}

fn start(
    home: &AgentHome,
    ws: &SessionWorkspace,
    bank: &mut SkillBank,
    model: &mut dyn ModelClient,
    cfg: &LoopConfig,
    deps: &mut AgentDeps,
    ctx: AgentContext,
) -> Result<RunStatus, LoopError> {
    let started = Instant::now();
    session::discard_events_after_turn(ws, ctx.turn_count())?;
    let events = session::read_events(ws)?;
    if events.is_empty() && ctx.is_empty() {
        bank.begin_session(ws.session_id())?;
    }
    persist_snapshot(ws, &ctx)?;

    let mut sandbox_counter = 0;
    let mut used_skills = BTreeSet::new();
    let mut failed_skills = BTreeSet::new();
    for e in &events {
        match e.kind {
            EventKind::ToolCall if e.payload["name"] == "create_sandbox" => sandbox_counter += 1,
            EventKind::Observation => {
                if let Some(s) = e.payload["skill"].as_str() {
                    used_skills.insert(s.to_string());
                }
                if let Some(s) = e.payload["skill_failed"].as_str() {
                    failed_skills.insert(s.to_string());
                }
            }
            _ => {}
        }
    }

    let mut run = Run {
        home,
        ws,
        log: EventLog::open(ws)?,
        instruction: ws.instruction()?,
        injected: ws.injected_skills()?,
        bank,
        model,
        cfg,
        deps,
        ctx,
        sandboxes: BTreeMap::new(),
        sandbox_counter,
        used_skills,
        failed_skills,
        scratch: scratch_dir(home, ws),
        started,
        first_model_call: None,
    };
    run.drive()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_boundary() {
        let cfg = LoopConfig::default();
        for t in 1..=3 {
            assert_eq!(gate_final_answer(t, &cfg), GateDecision::ForceVerify);
        }
        assert_eq!(gate_final_answer(4, &cfg), GateDecision::Accept);
        assert_eq!(gate_final_answer(10, &cfg), GateDecision::Accept);
    }

    #[test]
    fn verification_parsing() {
        assert!(parse_verification("{\"complete\": true, \"reason\": \"ok\"}").complete);
        assert!(!parse_verification("{\"complete\": false}").complete);
        assert!(parse_verification("Complete: the report exists").complete);
        assert!(!parse_verification("incomplete: missing file").complete);
        assert!(!parse_verification("").complete);
    }

    #[test]
    fn exec_formatting() {
        let r = ExecResult {
            exit_code: 0,
            stdout: "ok".into(),
            stderr: String::new(),
            duration: Duration::ZERO,
            timed_out: false,
        };
        assert_eq!(
            format_exec(&r, Duration::from_secs(60)),
            "exit_code: 0\nstdout:\nok\n"
        );
    }
}
