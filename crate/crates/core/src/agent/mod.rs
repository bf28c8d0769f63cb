//! The Plan / Action / Observe loop.
//!
//! Each turn: compress the context if it is over budget, call the model
//! (with retry), dispatch its tool calls, and append the response plus
//! observations as one conversation node. The run ends on an accepted
//! `final_answer`; early answers must first pass `verify_completion`.

pub mod model;
pub mod retry;
mod runner;
pub mod tools;

use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::Deserialize;

pub use model::{
    ErrorKind, ModelClient, ModelError, ModelRequest, ModelResponse, Purpose, RemoteModelClient,
    Script, ScriptedModel, ScriptedResponse, ToolSchema,
};
pub use retry::{
    call_model_with_retry, RecordingSleeper, RetryError, RetryOutcome, RetryPolicy, Sleeper,
    ThreadSleeper, MAX_RETRY,
};
pub use runner::{
    execute_skill, gate_final_answer, parse_verification, resume_task, run_task, AgentDeps,
    GateDecision, LoopError, RunStatus, SearchDoc, Verification,
};
pub use tools::{
    dispatch_tool_call, truncate_tool_output, TimeoutClass, ToolError, ToolHandler, ToolRegistry,
    ToolSpec, BUILTIN_TOOLS,
};

use crate::context::CompressionBudget;
use crate::lifecycle::DEFAULT_MAX_ROUNDS;

pub const TOOL_TEXT_LIMIT: usize = 8_192;
pub const TOOL_TIMEOUT: Duration = Duration::from_secs(300);
pub const TERMINAL_TIMEOUT: Duration = Duration::from_secs(60);
pub const EXEC_CODE_TIMEOUT: Duration = crate::sandbox::EXEC_CODE_TIMEOUT;
pub const VERIFY_COMPLETION_TIMEOUT: Duration = Duration::from_secs(120);
pub const MODEL_TIMEOUT: Duration = Duration::from_secs(300);
/// Smallest turn at which `final_answer` is accepted without verification.
pub const VERIFY_COMPLETION_TURN_THRESHOLD: usize = 4;
pub const DEFAULT_MAX_TURNS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub tool_text_limit: usize,
    pub tool_timeout: Duration,
    pub terminal_timeout: Duration,
    pub exec_code_timeout: Duration,
    pub verify_completion_timeout: Duration,
    pub model_timeout: Duration,
    pub max_retry: u32,
    pub verify_completion_turn_threshold: usize,
    pub max_turns: usize,
    /// Pause (without finalizing) once this many turns exist; used to split
    /// a run across processes.
    pub stop_after_turns: Option<usize>,
    pub budget: CompressionBudget,
    pub max_refine_rounds: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            tool_text_limit: TOOL_TEXT_LIMIT,
            tool_timeout: TOOL_TIMEOUT,
            terminal_timeout: TERMINAL_TIMEOUT,
            exec_code_timeout: EXEC_CODE_TIMEOUT,
            verify_completion_timeout: VERIFY_COMPLETION_TIMEOUT,
            model_timeout: MODEL_TIMEOUT,
            max_retry: MAX_RETRY,
            verify_completion_turn_threshold: VERIFY_COMPLETION_TURN_THRESHOLD,
            max_turns: DEFAULT_MAX_TURNS,
            stop_after_turns: None,
            budget: CompressionBudget::default(),
            max_refine_rounds: DEFAULT_MAX_ROUNDS,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let durations = [
            self.tool_timeout,
            self.terminal_timeout,
            self.exec_code_timeout,
            self.verify_completion_timeout,
            self.model_timeout,
        ];
        if self.tool_text_limit == 0
            || durations.iter().any(Duration::is_zero)
            || self.max_retry == 0
            || self.verify_completion_turn_threshold == 0
            || self.max_turns == 0
            || self.max_refine_rounds == 0
        {
            return Err(ConfigError::Invalid(
                "all loop limits must be positive".into(),
            ));
        }
        self.budget
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retry: self.max_retry,
            ..RetryPolicy::default()
        }
    }
}

/// Timeout overrides in seconds.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeoutOverrides {
    pub tool: Option<u64>,
    pub terminal: Option<u64>,
    pub exec_code: Option<u64>,
    pub verify_completion: Option<u64>,
    pub model: Option<u64>,
}

/// `<agent-home>/config.toml`.
///
/// ```toml
/// model_id = "my-model"
/// endpoint = "https://api.example.com/v1"
/// api_key_env = "OPENAI_API_KEY"
/// max_turns = 50
///
/// [timeouts]
/// terminal = 90
/// ```
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub model_id: Option<String>,
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub max_turns: Option<usize>,
    pub max_retry: Option<u32>,
    pub tool_text_limit: Option<usize>,
    #[serde(default)]
    pub timeouts: TimeoutOverrides,
}

impl AgentConfig {
    /// Reads the file; a missing file is an empty config.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Self::default()),
            Err(source) => {
                return Err(ConfigError::Read {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn loop_config(&self) -> Result<LoopConfig, ConfigError> {
        let mut cfg = LoopConfig::default();
        let t = &self.timeouts;
        let secs = Duration::from_secs;
        if let Some(v) = t.tool {
            cfg.tool_timeout = secs(v);
        }
        if let Some(v) = t.terminal {
            cfg.terminal_timeout = secs(v);
        }
        if let Some(v) = t.exec_code {
            cfg.exec_code_timeout = secs(v);
        }
        if let Some(v) = t.verify_completion {
            cfg.verify_completion_timeout = secs(v);
        }
        if let Some(v) = t.model {
            cfg.model_timeout = secs(v);
        }
        if let Some(v) = self.max_turns {
            cfg.max_turns = v;
        }
        if let Some(v) = self.max_retry {
            cfg.max_retry = v;
        }
        if let Some(v) = self.tool_text_limit {
            cfg.tool_text_limit = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn remote_client(&self) -> Result<RemoteModelClient, ConfigError> {
        let model_id = self.model_id.clone().ok_or_else(|| {
            ConfigError::Invalid("`model_id` is required for a remote model".into())
        })?;
        let endpoint = self.endpoint.clone().ok_or_else(|| {
            ConfigError::Invalid("`endpoint` is required for a remote model".into())
        })?;
        let api_key = self
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok());
        RemoteModelClient::new(model_id, endpoint, api_key)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
