//! Skill packages: a directory named after the skill holding a `SKILL.md`
//! (frontmatter + Markdown body) and the optional `scripts/`, `tests/`,
//! `resources/` and `references/` subdirectories.
//!
//! Frontmatter is a restricted YAML subset: one `key: value` per line, scalar
//! values only, plain or double-quoted. Plain values may continue on indented
//! lines (folded with a single space). Every source line is kept verbatim so
//! that rendering an unmodified parse reproduces the input bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use indexmap::IndexMap;
use regex::Regex;
use serde::Serialize;

use crate::fsutil;
use crate::skill_bank::CatalogEntry;

pub const SKILL_MD: &str = "SKILL.md";
pub const MEMORY_FILE: &str = ".memory.md";

/// Descriptions longer than this (in characters) raise a warning.
pub const DESCRIPTION_WARN_CHARS: usize = 2_000;

static NAME_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[a-z0-9]+(-[a-z0-9]+)*$").unwrap());
static KEY_LINE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^([A-Za-z0-9_][A-Za-z0-9_.-]*):([ \t]*)(.*)$").unwrap());

pub fn is_valid_name(name: &str) -> bool {
    NAME_RE.is_match(name)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SkillMdError {
    #[error("SKILL.md has no frontmatter block delimited by `---` lines")]
    MissingFrontmatter,
    #[error("frontmatter is missing required key `{0}`")]
    MissingRequiredKey(&'static str),
    #[error("frontmatter description is empty")]
    EmptyDescription,
    #[error("frontmatter name `{name}` does not match directory `{dir}`")]
    NameMismatch { name: String, dir: String },
    #[error("skill name `{0}` is not kebab-case")]
    MalformedName(String),
    #[error("frontmatter line {line}: {reason}")]
    MalformedFrontmatter { line: usize, reason: String },
    #[error("frontmatter key `{0}` appears more than once")]
    DuplicateKey(String),
}

#[derive(Debug, thiserror::Error)]
pub enum PackageError {
    #[error("{0} does not contain a SKILL.md")]
    MissingSkillMd(PathBuf),
    #[error("{path}: {source}")]
    InvalidSkillMd { path: PathBuf, source: SkillMdError },
    #[error("destination {0} already exists")]
    DestinationExists(PathBuf),
    #[error("package has validation errors: {0}")]
    Invalid(String),
    #[error("io failure at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl PackageError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| PackageError::Io { path, source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarStyle {
    Plain,
    DoubleQuoted,
}

#[derive(Debug, Clone)]
struct Entry {
    key: String,
    value: String,
    style: ScalarStyle,
    /// Exact source text of the entry, continuation lines included.
    raw: String,
}

#[derive(Debug, Clone)]
enum Line {
    Entry(Entry),
    /// Blank or `#` comment line, kept for round-trip.
    Trivia(String),
}

/// Parsed frontmatter. Equality is structural (name, description, extra keys
/// in order) and ignores source formatting.
#[derive(Debug, Clone)]
pub struct SkillFrontmatter {
    lines: Vec<Line>,
}

impl PartialEq for SkillFrontmatter {
    fn eq(&self, other: &Self) -> bool {
        self.name() == other.name()
            && self.description() == other.description()
            && self.extra() == other.extra()
    }
}

impl Eq for SkillFrontmatter {}

impl SkillFrontmatter {
    pub fn new(name: &str, description: &str) -> Self {
        let mut fm = Self { lines: Vec::new() };
        fm.set("name", name);
        fm.set("description", description);
        fm
    }

    pub fn name(&self) -> &str {
        self.get("name").unwrap_or("")
    }

    pub fn description(&self) -> &str {
        self.get("description").unwrap_or("")
    }

    /// Keys other than `name` and `description`, in source order.
    pub fn extra(&self) -> IndexMap<String, String> {
        self.entries()
            .filter(|e| e.key != "name" && e.key != "description")
            .map(|e| (e.key.clone(), e.value.clone()))
            .collect()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries()
            .find(|e| e.key == key)
            .map(|e| e.value.as_str())
    }

    /// Scalar style the value of `key` was written in.
    pub fn style(&self, key: &str) -> Option<ScalarStyle> {
        self.entries().find(|e| e.key == key).map(|e| e.style)
    }

    /// Sets a key, re-rendering only that entry. New keys are appended.
    pub fn set(&mut self, key: &str, value: &str) {
        let style = if needs_quotes(value) {
            ScalarStyle::DoubleQuoted
        } else {
            ScalarStyle::Plain
        };
        let raw = render_entry(key, value, style);
        let entry = Entry {
            key: key.to_string(),
            value: value.to_string(),
            style,
            raw,
        };
        for line in &mut self.lines {
            if let Line::Entry(e) = line {
                if e.key == key {
                    *e = entry;
                    return;
                }
            }
        }
        self.lines.push(Line::Entry(entry));
    }

    fn entries(&self) -> impl Iterator<Item = &Entry> {
        self.lines.iter().filter_map(|l| match l {
            Line::Entry(e) => Some(e),
            Line::Trivia(_) => None,
        })
    }

    fn render(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            match line {
                Line::Entry(e) => out.push_str(&e.raw),
                Line::Trivia(t) => out.push_str(t),
            }
        }
        out
    }
}

fn needs_quotes(value: &str) -> bool {
    value.is_empty()
        || value != value.trim()
        || value.contains('\n')
        || value.contains(": ")
        || value.contains(" #")
        || value.starts_with([
            '"', '\'', '[', ']', '{', '}', '>', '|', '*', '&', '!', '%', '@', '`', '#', ',', '?',
            '-', ':',
        ])
}

fn render_entry(key: &str, value: &str, style: ScalarStyle) -> String {
    match style {
        ScalarStyle::Plain => format!("{key}: {value}\n"),
        ScalarStyle::DoubleQuoted => format!("{key}: {}\n", double_quote(value)),
    }
}

fn double_quote(value: &str) -> String {
    let mut escaped = String::with_capacity(value.len() + 2);
    escaped.push('"');
    for c in value.chars() {
        match c {
            '\\' => escaped.push_str("\\\\"),
            '"' => escaped.push_str("\\\""),
            '\n' => escaped.push_str("\\n"),
            '\t' => escaped.push_str("\\t"),
            c => escaped.push(c),
        }
    }
    escaped.push('"');
    escaped
}

/// A scalar in the same restricted YAML dialect: bare when safe, otherwise
/// double-quoted.
pub(crate) fn yaml_scalar(value: &str) -> String {
    if needs_quotes(value) {
        double_quote(value)
    } else {
        value.to_string()
    }
}

fn unquote(s: &str) -> Option<String> {
    let inner = s.strip_prefix('"')?.strip_suffix('"')?;
    let mut out = String::with_capacity(inner.len());
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.next()? {
                '\\' => out.push('\\'),
                '"' => out.push('"'),
                'n' => out.push('\n'),
                't' => out.push('\t'),
                _ => return None,
            },
            '"' => return None,
            c => out.push(c),
        }
    }
    Some(out)
}

fn strip_eol(line: &str) -> &str {
    let line = line.strip_suffix('\n').unwrap_or(line);
    line.strip_suffix('\r').unwrap_or(line)
}

/// A parsed `SKILL.md`: frontmatter plus the body bytes after the closing
/// delimiter, verbatim.
#[derive(Debug, Clone)]
pub struct SkillMd {
    pub frontmatter: SkillFrontmatter,
    pub body: String,
    open_delim: String,
    close_delim: String,
}

impl PartialEq for SkillMd {
    fn eq(&self, other: &Self) -> bool {
        self.frontmatter == other.frontmatter && self.body == other.body
    }
}

impl Eq for SkillMd {}

impl SkillMd {
    pub fn new(frontmatter: SkillFrontmatter, body: impl Into<String>) -> Self {
        Self {
            frontmatter,
            body: body.into(),
            open_delim: "---\n".into(),
            close_delim: "---\n".into(),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.body.len() + 256);
        out.push_str(&self.open_delim);
        out.push_str(&self.frontmatter.render());
        out.push_str(&self.close_delim);
        out.push_str(&self.body);
        out
    }
}

#[derive(Debug, Clone)]
pub struct ParsedSkillMd {
    pub skill_md: SkillMd,
    /// Non-blocking findings (unknown keys, very long description).
    pub warnings: Vec<String>,
}

/// Parses `SKILL.md` text for a package whose directory basename is `dir_name`.
pub fn parse_skill_md(text: &str, dir_name: &str) -> Result<ParsedSkillMd, SkillMdError> {
    let mut lines = text.split_inclusive('\n');
    let open = lines.next().ok_or(SkillMdError::MissingFrontmatter)?;
    if strip_eol(open) != "---" {
        return Err(SkillMdError::MissingFrontmatter);
    }

    let mut fm_lines: Vec<Line> = Vec::new();
    let mut close: Option<&str> = None;
    let mut consumed = open.len();
    for (idx, raw) in lines.by_ref().enumerate() {
        consumed += raw.len();
        let lineno = idx + 2;
        let content = strip_eol(raw);
        if content == "---" {
            close = Some(raw);
            break;
        }
        if content.trim().is_empty() || content.starts_with('#') {
            fm_lines.push(Line::Trivia(raw.to_string()));
            continue;
        }
        if content.starts_with([' ', '\t']) {
            match fm_lines.last_mut() {
                Some(Line::Entry(e)) if e.style == ScalarStyle::Plain => {
                    let piece = content.trim();
                    if !e.value.is_empty() {
                        e.value.push(' ');
                    }
                    e.value.push_str(piece);
                    e.raw.push_str(raw);
                    continue;
                }
                _ => {
                    return Err(SkillMdError::MalformedFrontmatter {
                        line: lineno,
                        reason: "indented line does not continue a plain value".into(),
                    })
                }
            }
        }
        let caps =
            KEY_LINE_RE
                .captures(content)
                .ok_or_else(|| SkillMdError::MalformedFrontmatter {
                    line: lineno,
                    reason: "expected `key: value`".into(),
                })?;
        let key = caps[1].to_string();
        let rest = caps[3].trim_end();
        let (value, style) = if rest.starts_with('"') {
            let v = unquote(rest).ok_or_else(|| SkillMdError::MalformedFrontmatter {
                line: lineno,
                reason: "unterminated or invalid double-quoted value".into(),
            })?;
            (v, ScalarStyle::DoubleQuoted)
        } else {
            (rest.to_string(), ScalarStyle::Plain)
        };
        if fm_lines
            .iter()
            .any(|l| matches!(l, Line::Entry(e) if e.key == key))
        {
            return Err(SkillMdError::DuplicateKey(key));
        }
        fm_lines.push(Line::Entry(Entry {
            key,
            value,
            style,
            raw: raw.to_string(),
        }));
    }
    let close = close.ok_or(SkillMdError::MissingFrontmatter)?;
    let body = text[consumed..].to_string();

    let frontmatter = SkillFrontmatter { lines: fm_lines };
    let name = frontmatter
        .get("name")
        .ok_or(SkillMdError::MissingRequiredKey("name"))?;
    let description = frontmatter
        .get("description")
        .ok_or(SkillMdError::MissingRequiredKey("description"))?;
    if !is_valid_name(name) {
        return Err(SkillMdError::MalformedName(name.to_string()));
    }
    if name != dir_name {
        return Err(SkillMdError::NameMismatch {
            name: name.to_string(),
            dir: dir_name.to_string(),
        });
    }
    if description.trim().is_empty() {
        return Err(SkillMdError::EmptyDescription);
    }

    let mut warnings: Vec<String> = frontmatter
        .extra()
        .keys()
        .map(|k| format!("unknown frontmatter key `{k}`"))
        .collect();
    let desc_chars = description.chars().count();
    if desc_chars > DESCRIPTION_WARN_CHARS {
        warnings.push(format!(
            "description is {desc_chars} characters (over {DESCRIPTION_WARN_CHARS})"
        ));
    }

    Ok(ParsedSkillMd {
        skill_md: SkillMd {
            frontmatter,
            body,
            open_delim: open.to_string(),
            close_delim: close.to_string(),
        },
        warnings,
    })
}

/// The four conventional subdirectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Subdir {
    Scripts,
    Tests,
    Resources,
    References,
}

impl Subdir {
    pub const ALL: [Subdir; 4] = [
        Subdir::Scripts,
        Subdir::Tests,
        Subdir::Resources,
        Subdir::References,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            Subdir::Scripts => "scripts",
            Subdir::Tests => "tests",
            Subdir::Resources => "resources",
            Subdir::References => "references",
        }
    }

    pub fn from_dir_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.dir_name() == name)
    }
}

impl fmt::Display for Subdir {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// The per-skill memory file next to `SKILL.md`. It is created lazily by the
/// memory store and is never part of a package write or export.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkillMemoryRef {
    pub path: PathBuf,
    pub exists: bool,
}

/// A skill directory on disk. Equality ignores `root`.
#[derive(Debug, Clone)]
pub struct SkillPackage {
    root: PathBuf,
    pub skill_md: SkillMd,
    /// Present subdirectories mapped to the files under them, as sorted
    /// root-relative paths (`scripts/run.sh`).
    pub subdirs: BTreeMap<Subdir, Vec<String>>,
}

impl PartialEq for SkillPackage {
    fn eq(&self, other: &Self) -> bool {
        self.skill_md == other.skill_md && self.subdirs == other.subdirs
    }
}

impl Eq for SkillPackage {}

impl SkillPackage {
    /// Loads the package rooted at `root`. The directory basename is the
    /// expected skill name.
    pub fn load(root: &Path) -> Result<Self, PackageError> {
        let skill_md_path = root.join(SKILL_MD);
        if !skill_md_path.is_file() {
            return Err(PackageError::MissingSkillMd(root.to_path_buf()));
        }
        let text = fs::read_to_string(&skill_md_path).map_err(PackageError::io(&skill_md_path))?;
        let parsed = parse_skill_md(&text, &dir_basename(root)).map_err(|source| {
            PackageError::InvalidSkillMd {
                path: skill_md_path.clone(),
                source,
            }
        })?;
        let mut subdirs = BTreeMap::new();
        for sub in Subdir::ALL {
            let dir = root.join(sub.dir_name());
            if dir.is_dir() {
                let files = fsutil::list_files(&dir).map_err(PackageError::io(&dir))?;
                subdirs.insert(
                    sub,
                    files.into_iter().map(|f| format!("{sub}/{f}")).collect(),
                );
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            skill_md: parsed.skill_md,
            subdirs,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn name(&self) -> &str {
        self.skill_md.frontmatter.name()
    }

    pub fn description(&self) -> &str {
        self.skill_md.frontmatter.description()
    }

    pub fn body(&self) -> &str {
        &self.skill_md.body
    }

    /// Every file belonging to the package, root-relative, `SKILL.md` first.
    pub fn files(&self) -> Vec<String> {
        let mut out = vec![SKILL_MD.to_string()];
        out.extend(self.subdirs.values().flatten().cloned());
        out
    }

    pub fn memory_ref(&self) -> SkillMemoryRef {
        let path = self.root.join(MEMORY_FILE);
        let exists = path.is_file();
        SkillMemoryRef { path, exists }
    }

    pub fn catalog_entry(&self) -> CatalogEntry {
        catalog_entry(self)
    }
}

pub fn catalog_entry(pkg: &SkillPackage) -> CatalogEntry {
    CatalogEntry {
        name: pkg.name().to_string(),
        description: pkg.description().to_string(),
    }
}

pub(crate) fn dir_basename(root: &Path) -> String {
    root.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FindingCode {
    NotADirectory,
    MissingSkillMd,
    UnreadableSkillMd,
    MissingFrontmatter,
    MissingRequiredKey,
    EmptyDescription,
    NameMismatch,
    MalformedName,
    MalformedFrontmatter,
    DuplicateKey,
    ExpectedDirectory,
    EmptySubdir,
    UnknownEntry,
    UnknownFrontmatterKey,
    LongDescription,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub code: FindingCode,
    pub message: String,
}

impl Finding {
    fn new(code: FindingCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub errors: Vec<Finding>,
    pub warnings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }
}

fn skill_md_finding(err: &SkillMdError) -> Finding {
    let code = match err {
        SkillMdError::MissingFrontmatter => FindingCode::MissingFrontmatter,
        SkillMdError::MissingRequiredKey(_) => FindingCode::MissingRequiredKey,
        SkillMdError::EmptyDescription => FindingCode::EmptyDescription,
        SkillMdError::NameMismatch { .. } => FindingCode::NameMismatch,
        SkillMdError::MalformedName(_) => FindingCode::MalformedName,
        SkillMdError::MalformedFrontmatter { .. } => FindingCode::MalformedFrontmatter,
        SkillMdError::DuplicateKey(_) => FindingCode::DuplicateKey,
    };
    Finding::new(code, err.to_string())
}

/// Checks a package directory. Never fails: every finding lands in the report.
///
/// | condition                                   | severity |
/// |---------------------------------------------|----------|
/// | root missing / not a directory              | error    |
/// | no top-level `SKILL.md`                     | error    |
/// | `SKILL.md` unreadable or frontmatter errors | error    |
/// | `scripts` etc. present but not a directory  | error    |
/// | known subdirectory present but empty        | warning  |
/// | other top-level entry (not `.memory.md`)    | warning  |
/// | unknown frontmatter key                     | warning  |
/// | description over 2,000 characters           | warning  |
pub fn validate_package(root: &Path) -> ValidationReport {
    let mut report = ValidationReport::default();
    if !root.is_dir() {
        report.errors.push(Finding::new(
            FindingCode::NotADirectory,
            format!("{} is not a directory", root.display()),
        ));
        return report;
    }

    let skill_md = root.join(SKILL_MD);
    if skill_md.is_file() {
        match fs::read_to_string(&skill_md) {
            Ok(text) => {
                match parse_skill_md(&text, &dir_basename(root)) {
                    Ok(parsed) => {
                        let fm = &parsed.skill_md.frontmatter;
                        for key in fm.extra().keys() {
                            report.warnings.push(Finding::new(
                                FindingCode::UnknownFrontmatterKey,
                                format!("unknown frontmatter key `{key}`"),
                            ));
                        }
                        let chars = fm.description().chars().count();
                        if chars > DESCRIPTION_WARN_CHARS {
                            report.warnings.push(Finding::new(
                            FindingCode::LongDescription,
                            format!("description is {chars} characters (over {DESCRIPTION_WARN_CHARS})"),
                        ));
                        }
                    }
                    Err(e) => report.errors.push(skill_md_finding(&e)),
                }
            }
            Err(e) => report.errors.push(Finding::new(
                FindingCode::UnreadableSkillMd,
                format!("cannot read SKILL.md: {e}"),
            )),
        }
    } else {
        report.errors.push(Finding::new(
            FindingCode::MissingSkillMd,
            "SKILL.md is missing",
        ));
    }

    let mut entries: Vec<String> = match fs::read_dir(root) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect(),
        Err(_) => Vec::new(),
    };
    entries.sort();
    for entry in entries {
        let path = root.join(&entry);
        if entry == SKILL_MD || entry == MEMORY_FILE {
            continue;
        }
        if Subdir::from_dir_name(&entry).is_some() {
            if !path.is_dir() {
                report.errors.push(Finding::new(
                    FindingCode::ExpectedDirectory,
                    format!("{entry} must be a directory"),
                ));
            } else if fsutil::list_files(&path)
                .map(|f| f.is_empty())
                .unwrap_or(false)
            {
                report.warnings.push(Finding::new(
                    FindingCode::EmptySubdir,
                    format!("{entry}/ present but empty"),
                ));
            }
            continue;
        }
        report.warnings.push(Finding::new(
            FindingCode::UnknownEntry,
            format!("unexpected top-level entry `{entry}`"),
        ));
    }
    report
}

/// Writes `pkg` as `dest/<name>/`. Only `SKILL.md` and the listed
/// subdirectory files are written; `.memory.md` never is.
pub fn write_skill_package(pkg: &SkillPackage, dest: &Path) -> Result<PathBuf, PackageError> {
    let target = dest.join(pkg.name());
    if target.exists() {
        return Err(PackageError::DestinationExists(target));
    }
    fs::create_dir_all(dest).map_err(PackageError::io(dest))?;
    let tmp = tempfile::Builder::new()
        .prefix(".write-")
        .tempdir_in(dest)
        .map_err(PackageError::io(dest))?;
    let stage = tmp.path().join(pkg.name());
    fs::create_dir(&stage).map_err(PackageError::io(&stage))?;
    fs::write(stage.join(SKILL_MD), pkg.skill_md.render())
        .map_err(PackageError::io(stage.join(SKILL_MD)))?;
    for (sub, files) in &pkg.subdirs {
        let dir = stage.join(sub.dir_name());
        fs::create_dir_all(&dir).map_err(PackageError::io(&dir))?;
        for rel in files {
            let to = stage.join(rel);
            if let Some(parent) = to.parent() {
                fs::create_dir_all(parent).map_err(PackageError::io(parent))?;
            }
            let from = pkg.root.join(rel);
            fs::copy(&from, &to).map_err(PackageError::io(&from))?;
        }
    }
    fs::rename(&stage, &target).map_err(PackageError::io(&target))?;
    Ok(target)
}

/// Streams the package at `root` as a tar archive under `<name>/`, skipping
/// every `.memory.md`. Returns the archived paths.
pub fn export_archive<W: Write>(root: &Path, out: W) -> Result<Vec<String>, PackageError> {
    let name = dir_basename(root);
    let files = fsutil::list_files(root).map_err(PackageError::io(root))?;
    let mut builder = tar::Builder::new(out);
    builder.mode(tar::HeaderMode::Deterministic);
    let mut listed = Vec::new();
    for rel in files {
        if rel.rsplit('/').next() == Some(MEMORY_FILE) {
            continue;
        }
        let entry_name = format!("{name}/{rel}");
        builder
            .append_path_with_name(root.join(&rel), &entry_name)
            .map_err(PackageError::io(root.join(&rel)))?;
        listed.push(entry_name);
    }
    builder.finish().map_err(PackageError::io(root))?;
    Ok(listed)
}
