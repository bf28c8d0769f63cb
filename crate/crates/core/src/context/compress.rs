//! Two-level adaptive compression of the active chain.
//!
//! Level 1 summarizes individual oversized nodes in place (oldest first,
//! stopping as soon as the chain fits). If the chain is still over budget,
//! level 2 collapses the whole unpinned middle span into one synthetic
//! summary node. The first `keep_first_turns` and last `keep_last_turns`
//! chain positions are never touched.

use serde::Serialize;

use super::{AgentContext, ContextError};

/// Maps text to a token count. Must be deterministic and monotone in length.
pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, text: &str) -> usize;
}

/// `ceil(bytes / 4)`.
#[derive(Debug, Default, Clone, Copy)]
pub struct ByteEstimator;

impl TokenEstimator for ByteEstimator {
    fn estimate(&self, text: &str) -> usize {
        estimate_tokens(text)
    }
}

pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct SummarizeError(pub String);

/// Turns a list of payload texts into one summary.
pub trait Summarizer {
    fn summarize(&mut self, payloads: &[String]) -> Result<String, SummarizeError>;
}

impl<F> Summarizer for F
where
    F: FnMut(&[String]) -> Result<String, SummarizeError>,
{
    fn summarize(&mut self, payloads: &[String]) -> Result<String, SummarizeError> {
        self(payloads)
    }
}

/// Keeps the first `max_bytes` bytes (on a char boundary) of the payloads
/// joined by newlines.
#[derive(Debug, Clone, Copy)]
pub struct HeadTruncationSummarizer {
    pub max_bytes: usize,
}

impl HeadTruncationSummarizer {
    pub fn summarize_text(&self, payloads: &[String]) -> String {
        let joined = payloads.join("\n");
        let mut end = self.max_bytes.min(joined.len());
        while !joined.is_char_boundary(end) {
            end -= 1;
        }
        joined[..end].to_string()
    }
}

impl Summarizer for HeadTruncationSummarizer {
    fn summarize(&mut self, payloads: &[String]) -> Result<String, SummarizeError> {
        Ok(self.summarize_text(payloads))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionLevel {
    Untouched,
    Level1,
    Level2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CompressionReport {
    /// Highest level applied.
    pub level: CompressionLevel,
    pub level1_attempted: bool,
    /// Active-chain positions summarized in place by level 1.
    pub level1_positions: Vec<usize>,
    /// Half-open active-chain position range collapsed by level 2.
    pub level2_span: Option<(usize, usize)>,
    pub summary_node: Option<String>,
    pub chain_len_before: usize,
    pub chain_len_after: usize,
    pub tokens_before: usize,
    pub tokens_after: usize,
}

/// Brings the active chain under `ctx.budget.compress_token_threshold` if it
/// is over. Returns [`ContextError::ChainTooShort`] (with nothing modified)
/// when the chain is over budget but has no unpinned middle.
pub fn maybe_compress_history(
    ctx: &mut AgentContext,
    summarizer: &mut dyn Summarizer,
) -> Result<CompressionReport, ContextError> {
    ctx.budget.validate()?;
    let budget = ctx.budget;
    let chain = ctx.active_chain_ids()?;
    let mut tokens: Vec<usize> = chain
        .iter()
        .map(|id| ctx.estimator.estimate(&ctx.nodes[id].effective_text()))
        .collect();
    let before: usize = tokens.iter().sum();
    let mut report = CompressionReport {
        level: CompressionLevel::Untouched,
        level1_attempted: false,
        level1_positions: Vec::new(),
        level2_span: None,
        summary_node: None,
        chain_len_before: chain.len(),
        chain_len_after: chain.len(),
        tokens_before: before,
        tokens_after: before,
    };
    if before <= budget.compress_token_threshold {
        return Ok(report);
    }
    let pinned = budget.keep_first_turns + budget.keep_last_turns;
    if chain.len() <= pinned {
        return Err(ContextError::ChainTooShort {
            len: chain.len(),
            pinned,
        });
    }
    let middle = budget.keep_first_turns..chain.len() - budget.keep_last_turns;

    // Level 1: per-node, in place.
    report.level1_attempted = true;
    let mut total = before;
    for pos in middle.clone() {
        if total <= budget.compress_token_threshold {
            break;
        }
        let node = &ctx.nodes[&chain[pos]];
        if node.is_summary
            || node.is_node_compressed
            || tokens[pos] <= budget.node_compress_token_threshold
        {
            continue;
        }
        let summary = summarizer
            .summarize(&[node.input.render()])
            .map_err(|e| ContextError::Summarizer(e.0))?;
        let new_tokens = ctx.estimator.estimate(&summary);
        let node = ctx.nodes.get_mut(&chain[pos]).expect("chain ids exist");
        node.compressed_input = Some(summary);
        node.is_node_compressed = true;
        total = total - tokens[pos] + new_tokens;
        tokens[pos] = new_tokens;
        report.level1_positions.push(pos);
    }
    if !report.level1_positions.is_empty() {
        report.level = CompressionLevel::Level1;
    }
    report.tokens_after = total;
    if total <= budget.compress_token_threshold {
        return Ok(report);
    }

    // Level 2: collapse the middle span into one summary node.
    let span_texts: Vec<String> = middle
        .clone()
        .map(|pos| ctx.nodes[&chain[pos]].effective_text())
        .collect();
    let summary = summarizer
        .summarize(&span_texts)
        .map_err(|e| ContextError::Summarizer(e.0))?;
    let summary_tokens = ctx.estimator.estimate(&summary);
    let parent = chain[middle.start - 1].clone();
    let summary_id = ctx.insert_summary(parent, summary);
    ctx.nodes
        .get_mut(&chain[middle.end])
        .expect("chain ids exist")
        .parent_id = Some(summary_id.clone());

    let span_tokens: usize = tokens[middle.clone()].iter().sum();
    report.level = CompressionLevel::Level2;
    report.level2_span = Some((middle.start, middle.end));
    report.summary_node = Some(summary_id);
    report.chain_len_after = chain.len() - middle.len() + 1;
    report.tokens_after = total - span_tokens + summary_tokens;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::TurnPayload;

    fn chain_of(sizes_tokens: &[usize]) -> (AgentContext, Vec<TurnPayload>) {
        let mut ctx = AgentContext::default();
        let mut shadow = Vec::new();
        for (i, t) in sizes_tokens.iter().enumerate() {
            let p = TurnPayload::text(char::from(b'a' + (i % 26) as u8).to_string().repeat(t * 4));
            shadow.push(p.clone());
            ctx.append_turn(p);
        }
        (ctx, shadow)
    }

    #[test]
    fn estimator_defaults() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens(&"x".repeat(4000)), 1000);
        assert_eq!(estimate_tokens("abcde"), 2);
    }

    #[test]
    fn under_budget_is_untouched() {
        let (mut ctx, _) = chain_of(&[50_000 / 12; 12]);
        let report =
            maybe_compress_history(&mut ctx, &mut HeadTruncationSummarizer { max_bytes: 100 })
                .unwrap();
        assert_eq!(report.level, CompressionLevel::Untouched);
        assert!(!report.level1_attempted);
    }

    #[test]
    fn too_short_chain_is_reported_unmodified() {
        let (mut ctx, _) = chain_of(&[20_000; 10]);
        let snap = ctx.to_snapshot();
        let err =
            maybe_compress_history(&mut ctx, &mut HeadTruncationSummarizer { max_bytes: 100 })
                .unwrap_err();
        assert_eq!(
            err,
            ContextError::ChainTooShort {
                len: 10,
                pinned: 10
            }
        );
        assert_eq!(ctx.to_snapshot(), snap);
    }

    #[test]
    fn summarizer_failure_propagates() {
        let (mut ctx, _) = chain_of(&[16_000; 12]);
        let mut failing =
            |_: &[String]| -> Result<String, SummarizeError> { Err(SummarizeError("down".into())) };
        assert_eq!(
            maybe_compress_history(&mut ctx, &mut failing).unwrap_err(),
            ContextError::Summarizer("down".into())
        );
    }

    #[test]
    fn append_after_collapse_links_history_to_last_original() {
        let (mut ctx, _) = chain_of(&[5_000; 40]);
        let last_original = ctx.tip().unwrap().to_string();
        let report =
            maybe_compress_history(&mut ctx, &mut HeadTruncationSummarizer { max_bytes: 100 })
                .unwrap();
        assert_eq!(report.level, CompressionLevel::Level2);
        let tip_before = ctx.tip().unwrap().to_string();
        let id = ctx.append_turn(TurnPayload::text("next"));
        let node = ctx.node(&id).unwrap();
        assert_eq!(node.parent_id(), Some(tip_before.as_str()));
        assert_eq!(node.history_prev(), Some(last_original.as_str()));
        assert_eq!(ctx.replay_full_history().unwrap().len(), 41);
    }
}
