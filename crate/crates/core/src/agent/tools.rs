//! Tool registry, external-handler dispatch and output truncation.

use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use indexmap::IndexMap;
use serde_json::{json, Value};

use super::model::ToolSchema;
use super::LoopConfig;
use crate::context::ToolCall;

/// Which configured deadline a tool runs under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeoutClass {
    Tool,
    Terminal,
    ExecCode,
    VerifyCompletion,
}

impl TimeoutClass {
    pub fn duration(self, cfg: &LoopConfig) -> Duration {
        match self {
            TimeoutClass::Tool => cfg.tool_timeout,
            TimeoutClass::Terminal => cfg.terminal_timeout,
            TimeoutClass::ExecCode => cfg.exec_code_timeout,
            TimeoutClass::VerifyCompletion => cfg.verify_completion_timeout,
        }
    }
}

/// Handler for a non-builtin tool. `Err` text is returned to the model.
pub type ToolHandler = Arc<dyn Fn(&Value) -> Result<String, String> + Send + Sync>;

#[derive(Debug, Clone, PartialEq)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub parameters: Value,
    pub timeout_class: TimeoutClass,
}

impl ToolSpec {
    pub fn new(
        name: &str,
        description: &str,
        parameters: Value,
        timeout_class: TimeoutClass,
    ) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            parameters,
            timeout_class,
        }
    }

    pub fn schema(&self) -> ToolSchema {
        ToolSchema {
            name: self.name.clone(),
            description: self.description.clone(),
            parameters: self.parameters.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ToolError {
    #[error("tool `{0}` is already registered")]
    DuplicateTool(String),
}

pub const BUILTIN_TOOLS: [&str; 12] = [
    "skill_create",
    "web_search",
    "read_skill",
    "terminal",
    "create_sandbox",
    "sandbox_run",
    "sandbox_upload",
    "sandbox_download",
    "close_sandbox",
    "verify_completion",
    "final_answer",
    "memory_append",
];

fn object(props: Value, required: &[&str]) -> Value {
    json!({"type": "object", "properties": props, "required": required})
}

fn builtin_specs() -> Vec<ToolSpec> {
    use TimeoutClass::*;
    let s = |t: &str| json!({"type": "string", "description": t});
    vec![
        ToolSpec::new(
            "skill_create",
            "Create a new skill from a spec, test it in a sandbox, refine it on failure and register it when its tests pass.",
            object(
                json!({"purpose": s("what the skill does"), "inputs": s("expected inputs"), "expected_outputs": s("expected outputs"), "name": s("optional kebab-case name")}),
                &["purpose"],
            ),
            Tool,
        ),
        ToolSpec::new("web_search", "Search the web.", object(json!({"query": s("search query")}), &["query"]), Tool),
        ToolSpec::new(
            "read_skill",
            "Load a skill's SKILL.md and its accumulated memory.",
            object(json!({"name": s("skill name from the catalog")}), &["name"]),
            Tool,
        ),
        ToolSpec::new(
            "terminal",
            "Run a shell command in the session scratch directory. $INPUTS_DIR holds the submitted inputs.",
            object(json!({"command": s("shell command")}), &["command"]),
            Terminal,
        ),
        ToolSpec::new("create_sandbox", "Create an isolated sandbox; returns its id.", object(json!({}), &[]), Tool),
        ToolSpec::new(
            "sandbox_run",
            "Run a shell command inside a sandbox (working directory /sandbox).",
            object(json!({"sandbox": s("sandbox id"), "command": s("shell command"), "timeout_seconds": {"type": "integer"}}), &["sandbox", "command"]),
            ExecCode,
        ),
        ToolSpec::new(
            "sandbox_upload",
            "Copy a session file (e.g. submitted_inputs/data.csv) or a whole skill (skill:<name>) into a sandbox.",
            object(json!({"sandbox": s("sandbox id"), "source": s("session-relative path or skill:<name>"), "dest": s("sandbox path")}), &["sandbox", "source"]),
            Tool,
        ),
        ToolSpec::new(
            "sandbox_download",
            "Read a file from a sandbox.",
            object(json!({"sandbox": s("sandbox id"), "path": s("sandbox path")}), &["sandbox", "path"]),
            Tool,
        ),
        ToolSpec::new("close_sandbox", "Destroy a sandbox.", object(json!({"sandbox": s("sandbox id")}), &["sandbox"]), Tool),
        ToolSpec::new(
            "verify_completion",
            "Ask an independent check whether the task is complete.",
            object(json!({"summary": s("what was done")}), &[]),
            VerifyCompletion,
        ),
        ToolSpec::new(
            "final_answer",
            "Finish the task. Outputs are written to result_output_files/.",
            object(
                json!({
                    "message": s("final answer text"),
                    "outputs": {"type": "array", "items": {"type": "object", "properties": {
                        "name": s("output file name"), "content": s("inline content"),
                        "sandbox": s("sandbox id to download from"), "path": s("sandbox path")
                    }, "required": ["name"]}}
                }),
                &["message"],
            ),
            Tool,
        ),
        ToolSpec::new(
            "memory_append",
            "Append a note to long-term, session or skill memory.",
            object(json!({"tier": {"type": "string", "enum": ["long_term", "session", "skill"]}, "skill": s("skill name for tier=skill"), "content": s("note")}), &["tier", "content"]),
            Tool,
        ),
    ]
}

/// Registered tools in registration order. Built-ins have no handler; the
/// loop executes them itself.
#[derive(Clone)]
pub struct ToolRegistry {
    tools: IndexMap<String, (ToolSpec, Option<ToolHandler>)>,
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.tools.keys()).finish()
    }
}

impl Default for ToolRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl ToolRegistry {
    pub fn with_builtins() -> Self {
        let tools = builtin_specs()
            .into_iter()
            .map(|s| (s.name.clone(), (s, None)))
            .collect();
        Self { tools }
    }

    pub fn register(&mut self, spec: ToolSpec, handler: ToolHandler) -> Result<(), ToolError> {
        if self.tools.contains_key(&spec.name) {
            return Err(ToolError::DuplicateTool(spec.name));
        }
        self.tools.insert(spec.name.clone(), (spec, Some(handler)));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    pub fn is_builtin(&self, name: &str) -> bool {
        matches!(self.tools.get(name), Some((_, None)))
    }

    pub fn spec(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.get(name).map(|(s, _)| s)
    }

    pub fn handler(&self, name: &str) -> Option<ToolHandler> {
        self.tools.get(name).and_then(|(_, h)| h.clone())
    }

    pub fn names(&self) -> Vec<&str> {
        self.tools.keys().map(String::as_str).collect()
    }

    pub fn schemas(&self) -> Vec<ToolSchema> {
        self.tools.values().map(|(s, _)| s.schema()).collect()
    }
}

/// Cuts `text` to at most `limit` characters, ending in
/// `\n[truncated: N chars omitted]` when anything was dropped.
pub fn truncate_tool_output(text: &str, limit: usize) -> String {
    let total = text.chars().count();
    if total <= limit {
        return text.to_string();
    }
    const FIXED: usize = "\n[truncated:  chars omitted]".len();
    // The marker's width depends on N, which depends on how much is kept.
    for digits in 1..=20 {
        let marker_len = FIXED + digits;
        if marker_len > limit {
            break;
        }
        let kept = limit - marker_len;
        let omitted = total - kept;
        if omitted.to_string().len() <= digits {
            let head: String = text.chars().take(kept).collect();
            return format!("{head}\n[truncated: {omitted} chars omitted]");
        }
    }
    text.chars().take(limit).collect()
}

/// Runs a handler on a worker thread and gives up after `timeout`.
pub(crate) fn run_handler(
    name: &str,
    handler: ToolHandler,
    args: &Value,
    timeout: Duration,
) -> String {
    let (tx, rx) = mpsc::channel();
    let args = args.clone();
    thread::spawn(move || {
        let _ = tx.send(handler(&args));
    });
    match rx.recv_timeout(timeout) {
        Ok(Ok(text)) => text,
        Ok(Err(e)) => format!("error: {e}"),
        Err(mpsc::RecvTimeoutError::Timeout) => format!(
            "error: tool {name} timed out after {}s",
            timeout.as_secs_f64()
        ),
        Err(mpsc::RecvTimeoutError::Disconnected) => format!("error: tool {name} panicked"),
    }
}

/// Dispatches a call to a registered external tool and truncates the
/// result. Unknown tools yield an error observation; built-ins need a
/// running session and are rejected here.
pub fn dispatch_tool_call(registry: &ToolRegistry, call: &ToolCall, cfg: &LoopConfig) -> String {
    let text = match registry.tools.get(&call.name) {
        None => format!("error: unknown tool {}", call.name),
        Some((_, None)) => format!("error: tool {} requires a running session", call.name),
        Some((spec, Some(handler))) => run_handler(
            &call.name,
            handler.clone(),
            &call.arguments,
            spec.timeout_class.duration(cfg),
        ),
    };
    truncate_tool_output(&text, cfg.tool_text_limit)
}
