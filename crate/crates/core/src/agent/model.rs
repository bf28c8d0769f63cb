//! The model-client boundary: one request → one response, with failures
//! classified as transient or permanent.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::context::{estimate_tokens, HeadTruncationSummarizer};
use crate::context::{TokenUsage, ToolCall};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    /// An ordinary loop turn.
    Turn,
    /// A `verify_completion` check.
    Verify,
    /// Compression summaries.
    Summarize,
    CreateSkillMd,
    PlanStructure,
    GenerateFile,
    Refine,
    Distill,
}

impl Purpose {
    pub fn as_str(self) -> &'static str {
        match self {
            Purpose::Turn => "turn",
            Purpose::Verify => "verify",
            Purpose::Summarize => "summarize",
            Purpose::CreateSkillMd => "create_skill_md",
            Purpose::PlanStructure => "plan_structure",
            Purpose::GenerateFile => "generate_file",
            Purpose::Refine => "refine",
            Purpose::Distill => "distill",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    /// JSON Schema of the arguments object.
    pub parameters: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRequest {
    pub purpose: Purpose,
    /// 1-based loop turn the request belongs to (0 outside a loop).
    pub turn_index: usize,
    pub system_prompt: String,
    /// The task statement or generation brief.
    pub instruction: String,
    /// Active-chain payloads, oldest first.
    pub messages: Vec<String>,
    pub tools: Vec<ToolSchema>,
    pub timeout: Duration,
}

impl ModelRequest {
    pub fn new(
        purpose: Purpose,
        system_prompt: impl Into<String>,
        instruction: impl Into<String>,
    ) -> Self {
        Self {
            purpose,
            turn_index: 0,
            system_prompt: system_prompt.into(),
            instruction: instruction.into(),
            messages: Vec::new(),
            tools: Vec::new(),
            timeout: super::MODEL_TIMEOUT,
        }
    }

    pub fn with_turn(mut self, turn: usize) -> Self {
        self.turn_index = turn;
        self
    }

    pub fn with_messages(mut self, messages: Vec<String>) -> Self {
        self.messages = messages;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn prompt_tokens(&self) -> u64 {
        (estimate_tokens(&self.system_prompt)
            + estimate_tokens(&self.instruction)
            + self
                .messages
                .iter()
                .map(|m| estimate_tokens(m))
                .sum::<usize>()) as u64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default)]
    pub usage: TokenUsage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Transient,
    Permanent,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind:?} model failure: {message}")]
pub struct ModelError {
    pub kind: ErrorKind,
    pub message: String,
}

impl ModelError {
    pub fn transient(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Transient,
            message: message.into(),
        }
    }

    pub fn permanent(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Permanent,
            message: message.into(),
        }
    }
}

pub trait ModelClient: Send {
    fn model_id(&self) -> String;
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelResponse, ModelError>;
}

impl<M: ModelClient + ?Sized> ModelClient for Box<M> {
    fn model_id(&self) -> String {
        (**self).model_id()
    }

    fn complete(&mut self, request: &ModelRequest) -> Result<ModelResponse, ModelError> {
        (**self).complete(request)
    }
}

impl<M: ModelClient + ?Sized> ModelClient for &mut M {
    fn model_id(&self) -> String {
        (**self).model_id()
    }

    fn complete(&mut self, request: &ModelRequest) -> Result<ModelResponse, ModelError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedResponse {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default)]
    pub usage: Option<TokenUsage>,
}

/// A scripted model fixture.
///
/// ```json
/// {
///   "model_id": "scripted",
///   "turns": [{"text": "plan", "tool_calls": [{"name": "terminal", "arguments": {"command": "echo ok"}}]}],
///   "verify": {"2": {"text": "{\"complete\": false, \"reason\": \"no output yet\"}"}},
///   "generation": {"create_skill_md": ["---\nname: x\n..."], "plan_structure": ["{\"files\": []}"]},
///   "transient_failures": {"3": 2}
/// }
/// ```
///
/// Turn responses are looked up by turn index (`turns[t - 1]`), verify
/// responses by turn index (defaulting to complete), generation responses
/// are consumed in order per purpose, and summaries are head truncations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default = "default_model_id")]
    pub model_id: String,
    #[serde(default)]
    pub turns: Vec<ScriptedResponse>,
    #[serde(default)]
    pub verify: BTreeMap<usize, ScriptedResponse>,
    #[serde(default)]
    pub generation: BTreeMap<Purpose, Vec<String>>,
    /// Turn index → number of transient failures before the call succeeds.
    #[serde(default)]
    pub transient_failures: BTreeMap<usize, usize>,
    /// Turn indices whose calls fail permanently.
    #[serde(default)]
    pub permanent_failures: Vec<usize>,
    #[serde(default = "default_summary_bytes")]
    pub summary_bytes: usize,
}

fn default_model_id() -> String {
    "scripted".to_string()
}

fn default_summary_bytes() -> usize {
    2_048
}

/// Deterministic model replaying a [`Script`].
#[derive(Debug, Clone)]
pub struct ScriptedModel {
    script: Script,
    generation_cursor: BTreeMap<Purpose, usize>,
    failures_served: BTreeMap<(Purpose, usize), usize>,
}

impl ScriptedModel {
    pub fn new(script: Script) -> Self {
        Self {
            script,
            generation_cursor: BTreeMap::new(),
            failures_served: BTreeMap::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text).map(Self::new)
    }

    pub fn from_file(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ModelError::permanent(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
            .map_err(|e| ModelError::permanent(format!("{}: {e}", path.display())))
    }

    pub fn script(&self) -> &Script {
        &self.script
    }

    fn usage(request: &ModelRequest, scripted: Option<TokenUsage>, text: &str) -> TokenUsage {
        scripted.unwrap_or(TokenUsage {
            fresh_in: request.prompt_tokens(),
            cached_in: 0,
            output: estimate_tokens(text) as u64,
        })
    }
}

impl ModelClient for ScriptedModel {
    fn model_id(&self) -> String {
        self.script.model_id.clone()
    }

    fn complete(&mut self, request: &ModelRequest) -> Result<ModelResponse, ModelError> {
        let turn = request.turn_index;
        if request.purpose == Purpose::Turn {
            if self.script.permanent_failures.contains(&turn) {
                return Err(ModelError::permanent(format!(
                    "scripted permanent failure at turn {turn}"
                )));
            }
            let wanted = self
                .script
                .transient_failures
                .get(&turn)
                .copied()
                .unwrap_or(0);
            let served = self
                .failures_served
                .entry((request.purpose, turn))
                .or_insert(0);
            if *served < wanted {
                *served += 1;
                return Err(ModelError::transient(format!(
                    "scripted transient failure {served}/{wanted} at turn {turn}"
                )));
            }
        }
        match request.purpose {
            Purpose::Turn => {
                let r = turn
                    .checked_sub(1)
                    .and_then(|i| self.script.turns.get(i))
                    .ok_or_else(|| {
                        ModelError::permanent(format!("script has no response for turn {turn}"))
                    })?;
                Ok(ModelResponse {
                    text: r.text.clone(),
                    tool_calls: r.tool_calls.clone(),
                    usage: Self::usage(request, r.usage, &r.text),
                })
            }
            Purpose::Verify => {
                let r =
                    self.script
                        .verify
                        .get(&turn)
                        .cloned()
                        .unwrap_or_else(|| ScriptedResponse {
                            text: json!({"complete": true, "reason": "scripted default"})
                                .to_string(),
                            ..Default::default()
                        });
                Ok(ModelResponse {
                    usage: Self::usage(request, r.usage, &r.text),
                    text: r.text,
                    tool_calls: Vec::new(),
                })
            }
            Purpose::Summarize => {
                let text = HeadTruncationSummarizer {
                    max_bytes: self.script.summary_bytes,
                }
                .summarize_text(&request.messages);
                Ok(ModelResponse {
                    usage: Self::usage(request, None, &text),
                    text,
                    tool_calls: Vec::new(),
                })
            }
            purpose => {
                let cursor = self.generation_cursor.entry(purpose).or_insert(0);
                let text = self
                    .script
                    .generation
                    .get(&purpose)
                    .and_then(|q| q.get(*cursor))
                    .cloned()
                    .ok_or_else(|| {
                        ModelError::permanent(format!(
                            "script has no more `{}` responses",
                            purpose.as_str()
                        ))
                    })?;
                *cursor += 1;
                Ok(ModelResponse {
                    usage: Self::usage(request, None, &text),
                    text,
                    tool_calls: Vec::new(),
                })
            }
        }
    }
}

/// Client for an OpenAI-compatible chat-completions endpoint.
pub struct RemoteModelClient {
    model_id: String,
    endpoint: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl RemoteModelClient {
    pub fn new(
        model_id: impl Into<String>,
        endpoint: impl Into<String>,
        api_key: Option<String>,
    ) -> Result<Self, ModelError> {
        let http = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| ModelError::permanent(format!("http client: {e}")))?;
        Ok(Self {
            model_id: model_id.into(),
            endpoint: endpoint.into(),
            api_key,
            http,
        })
    }

    fn body(&self, request: &ModelRequest) -> Value {
        let mut messages = vec![
            json!({"role": "system", "content": request.system_prompt}),
            json!({"role": "user", "content": request.instruction}),
        ];
        messages.extend(
            request
                .messages
                .iter()
                .map(|m| json!({"role": "assistant", "content": m})),
        );
        let mut body = json!({"model": self.model_id, "messages": messages});
        if !request.tools.is_empty() {
            body["tools"] = request
                .tools
                .iter()
                .map(|t| json!({"type": "function", "function": {"name": t.name, "description": t.description, "parameters": t.parameters}}))
                .collect();
        }
        body
    }
}

fn parse_chat_response(v: &Value) -> Result<ModelResponse, ModelError> {
    let message = v
        .pointer("/choices/0/message")
        .ok_or_else(|| ModelError::permanent("response has no choices[0].message"))?;
    let text = message["content"].as_str().unwrap_or_default().to_string();
    let mut tool_calls = Vec::new();
    for call in message["tool_calls"].as_array().into_iter().flatten() {
        let name = call
            .pointer("/function/name")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let raw = call
            .pointer("/function/arguments")
            .and_then(Value::as_str)
            .unwrap_or("{}");
        let arguments = serde_json::from_str(raw).unwrap_or_else(|_| json!({"_raw": raw}));
        tool_calls.push(ToolCall { name, arguments });
    }
    let u = &v["usage"];
    let prompt = u["prompt_tokens"].as_u64().unwrap_or(0);
    let cached = u
        .pointer("/prompt_tokens_details/cached_tokens")
        .and_then(Value::as_u64)
        .unwrap_or(0);
    let usage = TokenUsage {
        fresh_in: prompt.saturating_sub(cached),
        cached_in: cached,
        output: u["completion_tokens"].as_u64().unwrap_or(0),
    };
    Ok(ModelResponse {
        text,
        tool_calls,
        usage,
    })
}

impl ModelClient for RemoteModelClient {
    fn model_id(&self) -> String {
        self.model_id.clone()
    }

    fn complete(&mut self, request: &ModelRequest) -> Result<ModelResponse, ModelError> {
        let url = format!("{}/chat/completions", self.endpoint.trim_end_matches('/'));
        let mut req = self
            .http
            .post(url)
            .timeout(request.timeout)
            .json(&self.body(request));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                ModelError::transient(e.to_string())
            } else {
                ModelError::permanent(e.to_string())
            }
        })?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ModelError::transient(format!("http {status}")));
        }
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(ModelError::permanent(format!("http {status}: {body}")));
        }
        let v: Value = resp
            .json()
            .map_err(|e| ModelError::transient(format!("bad response body: {e}")))?;
        parse_chat_response(&v)
    }
}
