//! Conversation state as a DAG of turns.
//!
//! Every [`ConversationNode`] carries two pointer sets:
//!
//! - `parent_id` (mutable) links the *active chain*, the nodes actually sent
//!   to the model, from the tip back to the root;
//! - `history_prev` / `history_next` (set once, never rewritten) link every
//!   original turn in creation order.
//!
//! Compression ([`compress`]) only ever rewires `parent_id` or fills
//! `compressed_input`; the original `input` of a node is never touched, so the
//! full history can always be replayed.

mod compress;

use std::collections::HashSet;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use compress::{
    estimate_tokens, maybe_compress_history, ByteEstimator, CompressionLevel, CompressionReport,
    HeadTruncationSummarizer, SummarizeError, Summarizer, TokenEstimator,
};

use crate::fsutil::random_hex_id;

pub const COMPRESS_TOKEN_THRESHOLD: usize = 180_000;
pub const NODE_COMPRESS_TOKEN_THRESHOLD: usize = 15_000;
pub const COMPRESS_KEEP_FIRST_TURNS: usize = 5;
pub const COMPRESS_KEEP_LAST_TURNS: usize = 5;

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContextError {
    #[error("active chain contains a cycle at node {0}")]
    CycleDetected(String),
    #[error("active chain is broken at node {0}")]
    BrokenChain(String),
    #[error("history link is broken at node {0}")]
    BrokenHistoryLink(String),
    #[error(
        "active chain has {len} turns, not more than the {pinned} pinned turns, but is over budget"
    )]
    ChainTooShort { len: usize, pinned: usize },
    #[error("summarizer failed: {0}")]
    Summarizer(String),
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("corrupt context: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionBudget {
    pub compress_token_threshold: usize,
    pub node_compress_token_threshold: usize,
    pub keep_first_turns: usize,
    pub keep_last_turns: usize,
}

impl Default for CompressionBudget {
    fn default() -> Self {
        Self {
            compress_token_threshold: COMPRESS_TOKEN_THRESHOLD,
            node_compress_token_threshold: NODE_COMPRESS_TOKEN_THRESHOLD,
            keep_first_turns: COMPRESS_KEEP_FIRST_TURNS,
            keep_last_turns: COMPRESS_KEEP_LAST_TURNS,
        }
    }
}

impl CompressionBudget {
    pub fn validate(&self) -> Result<(), ContextError> {
        if self.compress_token_threshold == 0
            || self.node_compress_token_threshold == 0
            || self.keep_first_turns == 0
            || self.keep_last_turns == 0
        {
            return Err(ContextError::InvalidBudget(
                "all budget values must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub fresh_in: u64,
    pub cached_in: u64,
    pub output: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    #[serde(default)]
    pub arguments: serde_json::Value,
}

/// Everything recorded for one turn.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnPayload {
    #[serde(default)]
    pub response: String,
    #[serde(default)]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default)]
    pub observations: Vec<String>,
    #[serde(default)]
    pub usage: TokenUsage,
}

impl TurnPayload {
    pub fn text(response: impl Into<String>) -> Self {
        Self {
            response: response.into(),
            ..Default::default()
        }
    }

    /// The text form sent to the model. A payload holding only a response
    /// renders to exactly that response.
    pub fn render(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        if !self.response.is_empty() {
            parts.push(self.response.clone());
        }
        for call in &self.tool_calls {
            parts.push(format!("[tool_call] {} {}", call.name, call.arguments));
        }
        for obs in &self.observations {
            parts.push(format!("[observation] {obs}"));
        }
        parts.join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationNode {
    node_id: String,
    input: TurnPayload,
    compressed_input: Option<String>,
    is_node_compressed: bool,
    is_summary: bool,
    parent_id: Option<String>,
    history_prev: Option<String>,
    history_next: Option<String>,
}

impl ConversationNode {
    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    /// The original payload. Never modified after construction.
    pub fn input(&self) -> &TurnPayload {
        &self.input
    }

    pub fn compressed_input(&self) -> Option<&str> {
        self.compressed_input.as_deref()
    }

    pub fn is_node_compressed(&self) -> bool {
        self.is_node_compressed
    }

    pub fn is_summary(&self) -> bool {
        self.is_summary
    }

    pub fn parent_id(&self) -> Option<&str> {
        self.parent_id.as_deref()
    }

    pub fn history_prev(&self) -> Option<&str> {
        self.history_prev.as_deref()
    }

    pub fn history_next(&self) -> Option<&str> {
        self.history_next.as_deref()
    }

    /// What the active-chain reader sees: the summary when compressed.
    pub fn effective_text(&self) -> String {
        match (&self.compressed_input, self.is_node_compressed) {
            (Some(summary), true) => summary.clone(),
            _ => self.input.render(),
        }
    }
}

/// One element of the active chain as the model sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChainEntry {
    pub node_id: String,
    pub text: String,
    pub is_summary: bool,
    pub is_node_compressed: bool,
}

/// The `ctx_state.json` document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSnapshot {
    pub version: u32,
    pub root: Option<String>,
    pub tip: Option<String>,
    pub nodes: Vec<ConversationNode>,
}

#[derive(Clone)]
pub struct AgentContext {
    nodes: IndexMap<String, ConversationNode>,
    root: Option<String>,
    tip: Option<String>,
    history_tail: Option<String>,
    turns: usize,
    pub budget: CompressionBudget,
    estimator: Arc<dyn TokenEstimator>,
}

impl std::fmt::Debug for AgentContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentContext")
            .field("root", &self.root)
            .field("tip", &self.tip)
            .field("turns", &self.turns)
            .field("nodes", &self.nodes.len())
            .field("budget", &self.budget)
            .finish()
    }
}

/// Structural equality: nodes (in creation order), root, tip and budget.
impl PartialEq for AgentContext {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.root == other.root
            && self.tip == other.tip
            && self.budget == other.budget
    }
}

impl Default for AgentContext {
    fn default() -> Self {
        Self::new(CompressionBudget::default())
    }
}

impl AgentContext {
    pub fn new(budget: CompressionBudget) -> Self {
        Self {
            nodes: IndexMap::new(),
            root: None,
            tip: None,
            history_tail: None,
            turns: 0,
            budget,
            estimator: Arc::new(ByteEstimator),
        }
    }

    pub fn with_estimator(mut self, estimator: Arc<dyn TokenEstimator>) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn estimator(&self) -> &dyn TokenEstimator {
        self.estimator.as_ref()
    }

    pub fn root(&self) -> Option<&str> {
        self.root.as_deref()
    }

    pub fn tip(&self) -> Option<&str> {
        self.tip.as_deref()
    }

    pub fn node(&self, id: &str) -> Option<&ConversationNode> {
        self.nodes.get(id)
    }

    /// All nodes in creation order, summary nodes included.
    pub fn nodes(&self) -> impl Iterator<Item = &ConversationNode> {
        self.nodes.values()
    }

    /// Number of original turns appended.
    pub fn turn_count(&self) -> usize {
        self.turns
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Appends a turn after the current tip and links it into the history.
    pub fn append_turn(&mut self, payload: TurnPayload) -> String {
        let id = loop {
            let id = random_hex_id();
            if !self.nodes.contains_key(&id) {
                break id;
            }
        };
        let node = ConversationNode {
            node_id: id.clone(),
            input: payload,
            compressed_input: None,
            is_node_compressed: false,
            is_summary: false,
            parent_id: self.tip.clone(),
            history_prev: self.history_tail.clone(),
            history_next: None,
        };
        if let Some(prev) = self
            .history_tail
            .as_ref()
            .and_then(|p| self.nodes.get_mut(p))
        {
            prev.history_next = Some(id.clone());
        }
        self.nodes.insert(id.clone(), node);
        if self.root.is_none() {
            self.root = Some(id.clone());
        }
        self.tip = Some(id.clone());
        self.history_tail = Some(id.clone());
        self.turns += 1;
        id
    }

    /// Active-chain node ids, root first.
    pub fn active_chain_ids(&self) -> Result<Vec<String>, ContextError> {
        let mut ids = Vec::new();
        let mut seen = HashSet::new();
        let mut cursor = self.tip.clone();
        while let Some(id) = cursor {
            if !seen.insert(id.clone()) {
                return Err(ContextError::CycleDetected(id));
            }
            let node = self
                .nodes
                .get(&id)
                .ok_or_else(|| ContextError::BrokenChain(id.clone()))?;
            cursor = node.parent_id.clone();
            ids.push(id);
        }
        ids.reverse();
        if ids.first().map(String::as_str) != self.root.as_deref() {
            return Err(ContextError::BrokenChain(
                ids.first().cloned().unwrap_or_default(),
            ));
        }
        Ok(ids)
    }

    /// The active chain root → tip, reading summaries for compressed nodes.
    pub fn active_chain(&self) -> Result<Vec<ChainEntry>, ContextError> {
        Ok(self
            .active_chain_ids()?
            .into_iter()
            .map(|id| {
                let node = &self.nodes[&id];
                ChainEntry {
                    text: node.effective_text(),
                    is_summary: node.is_summary,
                    is_node_compressed: node.is_node_compressed,
                    node_id: id,
                }
            })
            .collect())
    }

    pub fn active_tokens(&self) -> Result<usize, ContextError> {
        Ok(self
            .active_chain()?
            .iter()
            .map(|e| self.estimator.estimate(&e.text))
            .sum())
    }

    /// Every original turn in creation order, straight from the history links.
    pub fn replay_full_history(&self) -> Result<Vec<TurnPayload>, ContextError> {
        Ok(self
            .history_nodes()?
            .into_iter()
            .map(|n| n.input.clone())
            .collect())
    }

    fn history_nodes(&self) -> Result<Vec<&ConversationNode>, ContextError> {
        let mut out = Vec::new();
        let mut prev: Option<&str> = None;
        let mut cursor = self.root.as_deref();
        while let Some(id) = cursor {
            let node = self
                .nodes
                .get(id)
                .ok_or_else(|| ContextError::BrokenHistoryLink(id.to_string()))?;
            if node.is_summary
                || node.history_prev.as_deref() != prev
                || out.len() > self.nodes.len()
            {
                return Err(ContextError::BrokenHistoryLink(id.to_string()));
            }
            out.push(node);
            prev = Some(id);
            cursor = node.history_next.as_deref();
        }
        Ok(out)
    }

    pub fn to_snapshot(&self) -> ContextSnapshot {
        ContextSnapshot {
            version: SNAPSHOT_VERSION,
            root: self.root.clone(),
            tip: self.tip.clone(),
            nodes: self.nodes.values().cloned().collect(),
        }
    }

    /// Rebuilds a context, checking every pointer invariant.
    pub fn from_snapshot(
        snapshot: ContextSnapshot,
        budget: CompressionBudget,
    ) -> Result<Self, ContextError> {
        if snapshot.version != SNAPSHOT_VERSION {
            return Err(ContextError::Corrupt(format!(
                "unsupported snapshot version {}",
                snapshot.version
            )));
        }
        let mut nodes = IndexMap::new();
        for node in snapshot.nodes {
            if node.is_node_compressed && node.compressed_input.is_none() {
                return Err(ContextError::Corrupt(format!(
                    "node {} is compressed without a summary",
                    node.node_id
                )));
            }
            if node.is_summary && (node.history_prev.is_some() || node.history_next.is_some()) {
                return Err(ContextError::Corrupt(format!(
                    "summary node {} has history links",
                    node.node_id
                )));
            }
            if nodes.insert(node.node_id.clone(), node).is_some() {
                return Err(ContextError::Corrupt("duplicate node id".into()));
            }
        }
        if nodes.is_empty() != snapshot.root.is_none() || nodes.is_empty() != snapshot.tip.is_none()
        {
            return Err(ContextError::Corrupt(
                "root/tip inconsistent with node set".into(),
            ));
        }
        let mut ctx = Self {
            nodes,
            root: snapshot.root,
            tip: snapshot.tip,
            history_tail: None,
            turns: 0,
            budget,
            estimator: Arc::new(ByteEstimator),
        };
        let history: Vec<String> = ctx
            .history_nodes()?
            .iter()
            .map(|n| n.node_id.clone())
            .collect();
        let originals = ctx.nodes.values().filter(|n| !n.is_summary).count();
        if history.len() != originals {
            return Err(ContextError::Corrupt(format!(
                "history walk reaches {} of {} original turns",
                history.len(),
                originals
            )));
        }
        ctx.active_chain_ids()?;
        ctx.turns = history.len();
        ctx.history_tail = history.last().cloned();
        Ok(ctx)
    }

    fn insert_summary(&mut self, parent: String, summary: String) -> String {
        let id = loop {
            let id = random_hex_id();
            if !self.nodes.contains_key(&id) {
                break id;
            }
        };
        self.nodes.insert(
            id.clone(),
            ConversationNode {
                node_id: id.clone(),
                input: TurnPayload::default(),
                compressed_input: Some(summary),
                is_node_compressed: true,
                is_summary: true,
                parent_id: Some(parent),
                history_prev: None,
                history_next: None,
            },
        );
        id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_append_is_root_and_tip() {
        let mut ctx = AgentContext::default();
        let id = ctx.append_turn(TurnPayload::text("hello"));
        assert_eq!(ctx.root(), Some(id.as_str()));
        assert_eq!(ctx.tip(), Some(id.as_str()));
        let node = ctx.node(&id).unwrap();
        assert!(
            node.parent_id().is_none()
                && node.history_prev().is_none()
                && node.history_next().is_none()
        );
        assert_eq!(id.len(), 32);
    }

    #[test]
    fn history_walk_in_order() {
        let mut ctx = AgentContext::default();
        for t in ["1", "2", "3"] {
            ctx.append_turn(TurnPayload::text(t));
        }
        let replay: Vec<_> = ctx
            .replay_full_history()
            .unwrap()
            .into_iter()
            .map(|p| p.response)
            .collect();
        assert_eq!(replay, ["1", "2", "3"]);
        assert_eq!(ctx.active_chain().unwrap().len(), 3);
    }

    #[test]
    fn empty_context() {
        let ctx = AgentContext::default();
        assert!(ctx.replay_full_history().unwrap().is_empty());
        assert!(ctx.active_chain().unwrap().is_empty());
    }

    #[test]
    fn render_shapes() {
        let p = TurnPayload {
            response: "plan".into(),
            tool_calls: vec![ToolCall {
                name: "terminal".into(),
                arguments: serde_json::json!({"command": "ls"}),
            }],
            observations: vec!["ok".into()],
            usage: TokenUsage::default(),
        };
        assert_eq!(
            p.render(),
            "plan\n[tool_call] terminal {\"command\":\"ls\"}\n[observation] ok"
        );
        assert_eq!(TurnPayload::text("abc").render(), "abc");
    }

    #[test]
    fn cycle_detected() {
        let mut ctx = AgentContext::default();
        let a = ctx.append_turn(TurnPayload::text("a"));
        let b = ctx.append_turn(TurnPayload::text("b"));
        ctx.nodes.get_mut(&a).unwrap().parent_id = Some(b);
        assert!(matches!(
            ctx.active_chain(),
            Err(ContextError::CycleDetected(_))
        ));
    }

    #[test]
    fn snapshot_rejects_broken_history() {
        let mut ctx = AgentContext::default();
        ctx.append_turn(TurnPayload::text("a"));
        let b = ctx.append_turn(TurnPayload::text("b"));
        let mut snap = ctx.to_snapshot();
        snap.nodes[0].history_next = None;
        assert!(AgentContext::from_snapshot(snap, CompressionBudget::default()).is_err());
        let mut snap = ctx.to_snapshot();
        snap.tip = Some("missing".into());
        assert!(AgentContext::from_snapshot(snap, CompressionBudget::default()).is_err());
        let snap = ctx.to_snapshot();
        let back = AgentContext::from_snapshot(snap, CompressionBudget::default()).unwrap();
        assert_eq!(back, ctx);
        assert_eq!(back.tip(), Some(b.as_str()));
    }
}
