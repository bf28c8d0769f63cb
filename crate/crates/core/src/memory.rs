//! Append-only Markdown memory files.
//!
//! Long-term (`memory/long_term_memory/memory.md`), session
//! (`sessions/<id>/memory.md`) and per-skill (`skills/<name>/.memory.md`)
//! memory all use the same block grammar:
//!
//! ```text
//! ## 2026-05-07 10:34:33 UTC
//! <content lines>
//! <blank line>
//! ```
//!
//! Writers only ever append a whole block under an exclusive file lock, so a
//! reader never sees half a block.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use chrono::{DateTime, NaiveDateTime, Timelike, Utc};
use regex::Regex;
use serde::Serialize;

use crate::clock::Clock;
use crate::fsutil;
use crate::home::AgentHome;
use crate::skill_package::MEMORY_FILE;

pub const HEADER_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

static HEADER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^## (\d{4}-\d{2}-\d{2} \d{2}:\d{2}:\d{2}) UTC$").unwrap());

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("memory content is empty")]
    EmptyContent,
    #[error("memory content contains a block header line: {0:?}")]
    HeaderInContent(String),
    #[error("io failure at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryBlock {
    /// `None` only for text found before the first header.
    pub timestamp: Option<DateTime<Utc>>,
    pub content: String,
}

impl MemoryBlock {
    pub fn is_pre_header(&self) -> bool {
        self.timestamp.is_none()
    }
}

pub fn format_header(ts: DateTime<Utc>) -> String {
    format!("## {} UTC", ts.format(HEADER_FORMAT))
}

/// Parses a header line (without its newline).
pub fn parse_header(line: &str) -> Option<DateTime<Utc>> {
    let caps = HEADER_RE.captures(line)?;
    NaiveDateTime::parse_from_str(&caps[1], HEADER_FORMAT)
        .ok()
        .map(|n| n.and_utc())
}

/// Normalizes block content the way [`append_block`] stores it.
pub fn normalize_content(content: &str) -> String {
    content.trim_end().to_string()
}

/// Renders one block exactly as it is appended.
pub fn render_block(ts: DateTime<Utc>, content: &str) -> String {
    format!("{}\n{}\n\n", format_header(ts), content)
}

/// Appends one block to `file`, creating it (and its parent directory) if absent.
pub fn append_block(
    file: &Path,
    content: &str,
    clock: &dyn Clock,
) -> Result<MemoryBlock, MemoryError> {
    let content = normalize_content(content);
    if content.trim().is_empty() {
        return Err(MemoryError::EmptyContent);
    }
    if let Some(line) = content
        .lines()
        .find(|l| HEADER_RE.is_match(l.trim_end_matches('\r')))
    {
        return Err(MemoryError::HeaderInContent(line.to_string()));
    }
    if let Some(parent) = file.parent() {
        fs::create_dir_all(parent).map_err(|source| MemoryError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    let now = clock.now();
    let ts = now.with_nanosecond(0).unwrap_or(now);
    fsutil::locked_append(file, render_block(ts, &content).as_bytes()).map_err(|source| {
        MemoryError::Io {
            path: file.to_path_buf(),
            source,
        }
    })?;
    Ok(MemoryBlock {
        timestamp: Some(ts),
        content,
    })
}

/// Reads every block in `file`. An absent file has no blocks.
pub fn read_blocks(file: &Path) -> Result<Vec<MemoryBlock>, MemoryError> {
    let text = match fs::read_to_string(file) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(MemoryError::Io {
                path: file.to_path_buf(),
                source,
            })
        }
    };
    Ok(parse_blocks(&text))
}

/// Splits memory text on header lines. Text before the first header becomes
/// a pre-header block (unless it is only whitespace).
pub fn parse_blocks(text: &str) -> Vec<MemoryBlock> {
    let mut blocks = Vec::new();
    let mut current: Option<MemoryBlock> = None;
    let mut pre = String::new();
    for line in text.split_inclusive('\n') {
        let bare = line.trim_end_matches('\n').trim_end_matches('\r');
        if let Some(ts) = parse_header(bare) {
            if let Some(mut block) = current.take() {
                block.content = normalize_content(&block.content);
                blocks.push(block);
            }
            current = Some(MemoryBlock {
                timestamp: Some(ts),
                content: String::new(),
            });
            continue;
        }
        match current.as_mut() {
            Some(block) => block.content.push_str(line),
            None => pre.push_str(line),
        }
    }
    if let Some(mut block) = current.take() {
        block.content = normalize_content(&block.content);
        blocks.push(block);
    }
    if !pre.trim().is_empty() {
        blocks.insert(
            0,
            MemoryBlock {
                timestamp: None,
                content: normalize_content(&pre),
            },
        );
    }
    blocks
}

/// Full memory text, or empty when the file does not exist.
pub fn read_text(file: &Path) -> Result<String, MemoryError> {
    match fs::read_to_string(file) {
        Ok(t) => Ok(t),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(String::new()),
        Err(source) => Err(MemoryError::Io {
            path: file.to_path_buf(),
            source,
        }),
    }
}

/// The three memory scopes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MemoryTier {
    LongTerm,
    Session(String),
    Skill(String),
}

impl MemoryTier {
    pub fn path(&self, home: &AgentHome) -> PathBuf {
        match self {
            MemoryTier::LongTerm => home.long_term_memory(),
            MemoryTier::Session(id) => home.sessions_dir().join(id).join("memory.md"),
            MemoryTier::Skill(name) => home.skills_dir().join(name).join(MEMORY_FILE),
        }
    }
}
