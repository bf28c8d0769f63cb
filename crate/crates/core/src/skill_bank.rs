//! The skill bank under `<home>/skills/`.
//!
//! One directory per registered skill. Two append-only logs sit next to them:
//!
//! - `.registry.jsonl`: `{ts, action, name, eval_passed, tests_run}` for every
//!   register / merge / remove / prune.
//! - `.usage.jsonl`: session starts, per-session skill outcomes and
//!   registration markers. Usage counters and prune decisions are derived by
//!   replaying it.
//!
//! Mutations hold an exclusive lock on `skills/.lock`; readers take a shared one.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, BufRead};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::clock::{rfc3339, Clock};
use crate::fsutil::{self, DirLock};
use crate::lifecycle::{EvaluationResult, TestFailure};
use crate::memory::{self, MemoryBlock};
use crate::skill_package::{
    self, validate_package, PackageError, SkillPackage, ValidationReport, MEMORY_FILE,
};

pub const REGISTRY_LOG: &str = ".registry.jsonl";
pub const USAGE_LOG: &str = ".usage.jsonl";
const LOCK_FILE: &str = ".lock";

/// Default prune thresholds: unused for 20 sessions, or 3 consecutive failures.
pub const DEFAULT_UNUSED_SESSIONS: usize = 20;
pub const DEFAULT_CONSECUTIVE_FAILURES: u32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum BankError {
    #[error("evaluation failed: {passed}/{run} tests passed")]
    EvaluationFailed {
        run: usize,
        passed: usize,
        failures: Vec<TestFailure>,
    },
    #[error("a different skill named `{0}` is already registered")]
    DuplicateName(String),
    #[error("package is invalid: {}", .0.errors.iter().map(|f| f.message.as_str()).collect::<Vec<_>>().join("; "))]
    InvalidPackage(ValidationReport),
    #[error("unknown skill `{0}`")]
    UnknownSkill(String),
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error("io failure at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> BankError {
    let path = path.into();
    move |source| BankError::Io { path, source }
}

/// One catalog line: what the agent sees before deciding to load a skill.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub name: String,
    pub description: String,
}

/// Catalog entries sorted by name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Catalog {
    pub entries: Vec<CatalogEntry>,
}

impl Catalog {
    pub fn from_entries(entries: impl IntoIterator<Item = CatalogEntry>) -> Self {
        let mut map: BTreeMap<String, CatalogEntry> = BTreeMap::new();
        for e in entries {
            map.insert(e.name.clone(), e);
        }
        Self {
            entries: map.into_values().collect(),
        }
    }

    /// Adds session-injected skills. An injected skill shadows a bank skill
    /// with the same name for the duration of the session.
    pub fn with_session_skills(&self, injected: &[SkillPackage]) -> Self {
        Self::from_entries(
            self.entries
                .iter()
                .cloned()
                .chain(injected.iter().map(|p| p.catalog_entry())),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// YAML sequence with exactly a `name:` and a `description:` line per
    /// entry. An empty catalog serializes to the empty string.
    pub fn to_yaml(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str("- name: ");
            out.push_str(&skill_package::yaml_scalar(&e.name));
            out.push_str("\n  description: ");
            out.push_str(&skill_package::yaml_scalar(&e.description));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub name: String,
    pub session_id: String,
    pub outcome: Outcome,
    pub ts: DateTime<Utc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum UsageLogEntry {
    Session {
        ts: String,
        session_id: String,
    },
    Usage {
        ts: String,
        session_id: String,
        name: String,
        outcome: Outcome,
    },
    Registered {
        ts: String,
        name: String,
    },
}

/// Line of `.registry.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEvent {
    pub ts: String,
    pub action: String,
    pub name: String,
    pub eval_passed: Option<bool>,
    pub tests_run: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SkillMeta {
    pub description: String,
    pub registered_at: Option<String>,
    pub uses: u64,
    pub successes: u64,
    pub failures: u64,
    pub consecutive_failures: u32,
    /// Sessions started since the skill was last used or registered.
    pub sessions_since_use: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrunePolicy {
    pub unused_sessions: usize,
    pub consecutive_failures: u32,
}

impl Default for PrunePolicy {
    fn default() -> Self {
        Self {
            unused_sessions: DEFAULT_UNUSED_SESSIONS,
            consecutive_failures: DEFAULT_CONSECUTIVE_FAILURES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RegistrationOutcome {
    pub name: String,
    pub path: PathBuf,
    /// True when an identical package was already registered.
    pub already_registered: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ResolvedSkill {
    pub package: SkillPackage,
    /// Full `.memory.md` text, empty when the file does not exist yet.
    pub memory: String,
}

pub struct SkillBank {
    dir: PathBuf,
    clock: Arc<dyn Clock>,
    index: BTreeMap<String, SkillMeta>,
    sessions_seen: usize,
}

impl std::fmt::Debug for SkillBank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SkillBank")
            .field("dir", &self.dir)
            .field("index", &self.index)
            .finish()
    }
}

impl SkillBank {
    /// Opens (creating if needed) the bank rooted at `dir` and builds its index.
    pub fn open(dir: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Result<Self, BankError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut bank = Self {
            dir,
            clock,
            index: BTreeMap::new(),
            sessions_seen: 0,
        };
        bank.refresh()?;
        Ok(bank)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn index(&self) -> &BTreeMap<String, SkillMeta> {
        &self.index
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn skill_dir(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Number of sessions recorded with [`SkillBank::begin_session`].
    pub fn sessions_seen(&self) -> usize {
        self.sessions_seen
    }

    fn lock(&self) -> Result<DirLock, BankError> {
        let path = self.dir.join(LOCK_FILE);
        DirLock::acquire(path.clone()).map_err(io_err(path))
    }

    /// Rebuilds the index from disk.
    pub fn refresh(&mut self) -> Result<(), BankError> {
        let lock_path = self.dir.join(LOCK_FILE);
        let _guard = DirLock::shared(lock_path.clone()).map_err(io_err(lock_path))?;
        self.refresh_unlocked()
    }

    fn refresh_unlocked(&mut self) -> Result<(), BankError> {
        let mut index = BTreeMap::new();
        let mut names: Vec<String> = fs::read_dir(&self.dir)
            .map_err(io_err(&self.dir))?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_dir()).unwrap_or(false))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| !n.starts_with('.'))
            .collect();
        names.sort();
        for name in names {
            let root = self.dir.join(&name);
            if !validate_package(&root).is_valid() {
                continue;
            }
            if let Ok(pkg) = SkillPackage::load(&root) {
                index.insert(
                    name,
                    SkillMeta {
                        description: pkg.description().to_string(),
                        ..Default::default()
                    },
                );
            }
        }

        for event in self.registry_events()? {
            if matches!(event.action.as_str(), "register" | "merge") {
                if let Some(meta) = index.get_mut(&event.name) {
                    meta.registered_at = Some(event.ts.clone());
                }
            }
        }

        // Replay usage: anchors are the session count at last use/registration.
        let mut sessions = 0usize;
        let mut anchors: BTreeMap<String, usize> = BTreeMap::new();
        for entry in self.usage_entries()? {
            match entry {
                UsageLogEntry::Session { .. } => sessions += 1,
                UsageLogEntry::Registered { name, .. } => {
                    anchors.insert(name.clone(), sessions);
                    if let Some(meta) = index.get_mut(&name) {
                        let description = std::mem::take(&mut meta.description);
                        let registered_at = meta.registered_at.take();
                        *meta = SkillMeta {
                            description,
                            registered_at,
                            ..Default::default()
                        };
                    }
                }
                UsageLogEntry::Usage { name, outcome, .. } => {
                    anchors.insert(name.clone(), sessions);
                    if let Some(meta) = index.get_mut(&name) {
                        meta.uses += 1;
                        match outcome {
                            Outcome::Success => {
                                meta.successes += 1;
                                meta.consecutive_failures = 0;
                            }
                            Outcome::Failure => {
                                meta.failures += 1;
                                meta.consecutive_failures += 1;
                            }
                        }
                    }
                }
            }
        }
        for (name, meta) in index.iter_mut() {
            meta.sessions_since_use = sessions - anchors.get(name).copied().unwrap_or(0);
        }
        self.index = index;
        self.sessions_seen = sessions;
        Ok(())
    }

    pub fn registry_events(&self) -> Result<Vec<RegistryEvent>, BankError> {
        read_jsonl(&self.dir.join(REGISTRY_LOG))
    }

    fn usage_entries(&self) -> Result<Vec<UsageLogEntry>, BankError> {
        read_jsonl(&self.dir.join(USAGE_LOG))
    }

    /// Every usage record, in append order.
    pub fn usage_records(&self) -> Result<Vec<UsageRecord>, BankError> {
        Ok(self
            .usage_entries()?
            .into_iter()
            .filter_map(|e| match e {
                UsageLogEntry::Usage {
                    ts,
                    session_id,
                    name,
                    outcome,
                } => Some(UsageRecord {
                    name,
                    session_id,
                    outcome,
                    ts: DateTime::parse_from_rfc3339(&ts)
                        .map(|t| t.with_timezone(&Utc))
                        .unwrap_or_default(),
                }),
                _ => None,
            })
            .collect())
    }

    fn append_registry(
        &self,
        action: &str,
        name: &str,
        eval: Option<&EvaluationResult>,
    ) -> Result<(), BankError> {
        let event = RegistryEvent {
            ts: rfc3339(self.clock.now()),
            action: action.to_string(),
            name: name.to_string(),
            eval_passed: eval.map(|e| e.all_passed()),
            tests_run: eval.map(|e| e.tests_run),
        };
        append_jsonl(&self.dir.join(REGISTRY_LOG), &event)
    }

    fn append_usage(&self, entry: &UsageLogEntry) -> Result<(), BankError> {
        append_jsonl(&self.dir.join(USAGE_LOG), entry)
    }

    /// Marks the start of a session; prune thresholds count these.
    pub fn begin_session(&mut self, session_id: &str) -> Result<(), BankError> {
        {
            let _guard = self.lock()?;
            self.append_usage(&UsageLogEntry::Session {
                ts: rfc3339(self.clock.now()),
                session_id: session_id.into(),
            })?;
        }
        self.refresh()
    }

    /// Appends a usage record for a registered skill.
    pub fn record_usage(
        &mut self,
        name: &str,
        session_id: &str,
        outcome: Outcome,
    ) -> Result<(), BankError> {
        if !self.contains(name) {
            return Err(BankError::UnknownSkill(name.to_string()));
        }
        {
            let _guard = self.lock()?;
            self.append_usage(&UsageLogEntry::Usage {
                ts: rfc3339(self.clock.now()),
                session_id: session_id.into(),
                name: name.into(),
                outcome,
            })?;
        }
        self.refresh()
    }

    /// Copies a staged package into the bank if its evaluation passed.
    pub fn register_skill(
        &mut self,
        pkg: &SkillPackage,
        eval: &EvaluationResult,
    ) -> Result<RegistrationOutcome, BankError> {
        let report = validate_package(pkg.root());
        if !report.is_valid() {
            return Err(BankError::InvalidPackage(report));
        }
        if !eval.all_passed() {
            return Err(BankError::EvaluationFailed {
                run: eval.tests_run,
                passed: eval.tests_passed,
                failures: eval.failures.clone(),
            });
        }
        let mut warnings = Vec::new();
        if eval.tests_run == 0 {
            warnings.push("unevaluated".to_string());
        }
        let name = pkg.name().to_string();
        let target = self.dir.join(&name);

        let guard = self.lock()?;
        if target.exists() {
            let existing = SkillPackage::load(&target).ok();
            if existing.as_ref() == Some(pkg) && same_file_bytes(pkg, &target) {
                return Ok(RegistrationOutcome {
                    name,
                    path: target,
                    already_registered: true,
                    warnings,
                });
            }
            return Err(BankError::DuplicateName(name));
        }
        let path = skill_package::write_skill_package(pkg, &self.dir)?;
        self.append_registry("register", &name, Some(eval))?;
        self.append_usage(&UsageLogEntry::Registered {
            ts: rfc3339(self.clock.now()),
            name: name.clone(),
        })?;
        self.refresh_unlocked()?;
        drop(guard);
        Ok(RegistrationOutcome {
            name,
            path,
            already_registered: false,
            warnings,
        })
    }

    /// Catalog of every registered skill, sorted by name.
    pub fn build_catalog(&self) -> Catalog {
        Catalog::from_entries(self.index.iter().map(|(name, meta)| CatalogEntry {
            name: name.clone(),
            description: meta.description.clone(),
        }))
    }

    /// Loads a registered skill together with its memory text.
    pub fn resolve_skill(&self, name: &str) -> Result<ResolvedSkill, BankError> {
        if !self.contains(name) {
            return Err(BankError::UnknownSkill(name.to_string()));
        }
        let lock_path = self.dir.join(LOCK_FILE);
        let _guard = DirLock::shared(lock_path.clone()).map_err(io_err(lock_path))?;
        let root = self.dir.join(name);
        let package = SkillPackage::load(&root)?;
        let memory_path = root.join(MEMORY_FILE);
        let memory = memory::read_text(&memory_path).map_err(|e| BankError::Io {
            path: memory_path.clone(),
            source: io::Error::other(e.to_string()),
        })?;
        Ok(ResolvedSkill { package, memory })
    }

    /// Names that `policy` would remove, sorted.
    pub fn prune_candidates(&self, policy: PrunePolicy) -> Vec<String> {
        self.index
            .iter()
            .filter(|(_, m)| {
                m.sessions_since_use >= policy.unused_sessions
                    || m.consecutive_failures >= policy.consecutive_failures
            })
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Removes every skill unused for `policy.unused_sessions` sessions or
    /// with at least `policy.consecutive_failures` consecutive failures.
    pub fn prune_skills(&mut self, policy: PrunePolicy) -> Result<Vec<String>, BankError> {
        let guard = self.lock()?;
        self.refresh_unlocked()?;
        let removed = self.prune_candidates(policy);
        for name in &removed {
            let dir = self.dir.join(name);
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
            self.append_registry("prune", name, None)?;
        }
        self.refresh_unlocked()?;
        drop(guard);
        Ok(removed)
    }

    /// Replaces `names` with `merged` in one step. Memory of the originals is
    /// carried over in name order, each block tagged with its source skill.
    pub fn merge_skills(
        &mut self,
        names: &[String],
        merged: &SkillPackage,
        eval: &EvaluationResult,
    ) -> Result<RegistrationOutcome, BankError> {
        let originals: BTreeSet<String> = names.iter().cloned().collect();
        for name in &originals {
            if !self.contains(name) {
                return Err(BankError::UnknownSkill(name.clone()));
            }
        }
        let report = validate_package(merged.root());
        if !report.is_valid() {
            return Err(BankError::InvalidPackage(report));
        }
        if !eval.all_passed() {
            return Err(BankError::EvaluationFailed {
                run: eval.tests_run,
                passed: eval.tests_passed,
                failures: eval.failures.clone(),
            });
        }
        let merged_name = merged.name().to_string();
        if self.contains(&merged_name) && !originals.contains(&merged_name) {
            return Err(BankError::DuplicateName(merged_name));
        }

        let guard = self.lock()?;
        let work = tempfile::Builder::new()
            .prefix(".merge-")
            .tempdir_in(&self.dir)
            .map_err(io_err(&self.dir))?;
        let built = skill_package::write_skill_package(merged, work.path())?;
        let memory_text = self.merged_memory(&originals)?;
        if !memory_text.is_empty() {
            fs::write(built.join(MEMORY_FILE), memory_text)
                .map_err(io_err(built.join(MEMORY_FILE)))?;
        }

        let trash = work.path().join(".trash");
        fs::create_dir(&trash).map_err(io_err(&trash))?;
        let mut moved: Vec<&String> = Vec::new();
        let rollback = |moved: &[&String]| {
            for name in moved {
                let _ = fs::rename(trash.join(name), self.dir.join(name));
            }
        };
        for name in &originals {
            if let Err(e) = fs::rename(self.dir.join(name), trash.join(name)) {
                rollback(&moved);
                return Err(BankError::Io {
                    path: self.dir.join(name),
                    source: e,
                });
            }
            moved.push(name);
        }
        let target = self.dir.join(&merged_name);
        if let Err(e) = fs::rename(&built, &target) {
            rollback(&moved);
            return Err(BankError::Io {
                path: target,
                source: e,
            });
        }
        drop(work);

        for name in &originals {
            if name != &merged_name {
                self.append_registry("remove", name, None)?;
            }
        }
        self.append_registry("merge", &merged_name, Some(eval))?;
        self.append_usage(&UsageLogEntry::Registered {
            ts: rfc3339(self.clock.now()),
            name: merged_name.clone(),
        })?;
        self.refresh_unlocked()?;
        drop(guard);
        let warnings = if eval.tests_run == 0 {
            vec!["unevaluated".to_string()]
        } else {
            Vec::new()
        };
        Ok(RegistrationOutcome {
            name: merged_name,
            path: target,
            already_registered: false,
            warnings,
        })
    }

    fn merged_memory(&self, originals: &BTreeSet<String>) -> Result<String, BankError> {
        let mut out = String::new();
        for name in originals {
            let path = self.dir.join(name).join(MEMORY_FILE);
            let blocks = memory::read_blocks(&path).map_err(|e| BankError::Io {
                path: path.clone(),
                source: io::Error::other(e.to_string()),
            })?;
            for MemoryBlock { timestamp, content } in blocks {
                let ts = timestamp.unwrap_or_else(|| self.clock.now());
                out.push_str(&memory::render_block(
                    ts,
                    &format!("[merged from {name}]\n{content}"),
                ));
            }
        }
        Ok(out)
    }
}

fn same_file_bytes(pkg: &SkillPackage, target: &Path) -> bool {
    pkg.files()
        .iter()
        .all(|rel| fs::read(pkg.root().join(rel)).ok() == fs::read(target.join(rel)).ok())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, BankError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => {
            return Err(BankError::Io {
                path: path.to_path_buf(),
                source: e,
            })
        }
    };
    let mut out = Vec::new();
    for line in io::BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| BankError::Io {
            path: path.to_path_buf(),
            source: io::Error::new(io::ErrorKind::InvalidData, e),
        })?;
        out.push(value);
    }
    Ok(out)
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<(), BankError> {
    let mut line = serde_json::to_string(value).expect("log entries serialize");
    line.push('\n');
    fsutil::locked_append(path, line.as_bytes()).map_err(io_err(path))
}
