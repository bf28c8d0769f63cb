//! Skill creation, evaluation, refinement and distillation.
//!
//! Generation is delegated to a [`ModelClient`]; every gate (parsing,
//! validation, test execution, registration) runs locally. The composed
//! pipeline is
//!
//! ```text
//! create ─▶ evaluate ─▶ (refine ─▶ evaluate)* ─▶ register | abandon
//! ```
//!
//! and only a package whose last evaluation passed is ever registered.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agent::model::{ModelClient, ModelError, ModelRequest, Purpose};
use crate::context::CompressionBudget;
use crate::sandbox::{normalize_sandbox_path, SandboxError, SandboxFactory, EXEC_CODE_TIMEOUT};
use crate::session::{self, RunMeta, SessionError, SessionWorkspace};
use crate::skill_bank::{BankError, RegistrationOutcome, SkillBank};
use crate::skill_package::{
    is_valid_name, parse_skill_md, validate_package, PackageError, SkillMd, SkillPackage, Subdir,
    MEMORY_FILE, SKILL_MD,
};

/// Refinement rounds attempted before giving up.
pub const DEFAULT_MAX_ROUNDS: usize = 3;
/// Captured test output kept per failure.
pub const FAILURE_OUTPUT_LIMIT: usize = 8_192;
/// Where the package is placed inside an evaluation sandbox.
pub const SANDBOX_SKILL_DIR: &str = "skill";

#[derive(Debug, thiserror::Error)]
pub enum LifecycleError {
    #[error("invalid skill spec: {0}")]
    InvalidSpec(String),
    #[error("model output for {step} is invalid: {reason}")]
    GenerationInvalid { step: &'static str, reason: String },
    #[error("session {0} did not succeed; refusing to distill")]
    SourceNotSuccessful(String),
    #[error("refinement exhausted after {} rounds", .0.rounds)]
    RefinementExhausted(Box<RefineOutcome>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error("io failure at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> LifecycleError {
    let path = path.into();
    move |source| LifecycleError::Io { path, source }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillSpec {
    pub purpose: String,
    #[serde(default)]
    pub inputs: String,
    #[serde(default)]
    pub expected_outputs: String,
    /// Package name; derived from `purpose` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl SkillSpec {
    pub fn resolved_name(&self) -> Result<String, LifecycleError> {
        if self.purpose.trim().is_empty() {
            return Err(LifecycleError::InvalidSpec(
                "purpose must not be empty".into(),
            ));
        }
        match &self.name {
            Some(n) if is_valid_name(n) => Ok(n.clone()),
            Some(n) => Err(LifecycleError::InvalidSpec(format!(
                "`{n}` is not a valid skill name"
            ))),
            None => Ok(slugify(&self.purpose)),
        }
    }
}

/// Lowercase kebab-case of the first words of `text`, at most 64 chars.
pub fn slugify(text: &str) -> String {
    let mut out = String::new();
    for word in text
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
    {
        let word = word.to_ascii_lowercase();
        let extra = if out.is_empty() {
            word.len()
        } else {
            word.len() + 1
        };
        if out.len() + extra > 64 {
            break;
        }
        if !out.is_empty() {
            out.push('-');
        }
        out.push_str(&word);
    }
    if out.is_empty() {
        "skill".to_string()
    } else {
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestFailure {
    pub test_file: String,
    pub exit_code: Option<i32>,
    pub output: String,
    #[serde(default)]
    pub timed_out: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub tests_run: usize,
    pub tests_passed: usize,
    pub failures: Vec<TestFailure>,
}

impl EvaluationResult {
    pub fn all_passed(&self) -> bool {
        self.tests_passed == self.tests_run
    }

    /// No tests were found; passing is vacuous.
    pub fn unevaluated(&self) -> bool {
        self.tests_run == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineStage {
    Create,
    Evaluate,
    Refine,
    Register,
    Abandon,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineStep {
    pub stage: PipelineStage,
    pub detail: Value,
}

impl PipelineStep {
    fn new(stage: PipelineStage, detail: Value) -> Self {
        Self { stage, detail }
    }

    fn evaluate(result: &EvaluationResult) -> Self {
        Self::new(
            PipelineStage::Evaluate,
            json!({"tests_run": result.tests_run, "tests_passed": result.tests_passed, "unevaluated": result.unevaluated()}),
        )
    }
}

const GENERATION_SYSTEM: &str = "You write skill packages: a directory with SKILL.md (YAML frontmatter with `name` and \
`description`, then a Markdown body) and optional scripts/, tests/, resources/ and references/ subdirectories. \
Reply with exactly the requested artifact and nothing else.";

/// Removes one surrounding Markdown code fence, if present.
fn strip_fence(text: &str) -> String {
    let trimmed = text.trim();
    if let Some(rest) = trimmed.strip_prefix("```") {
        if let Some(nl) = rest.find('\n') {
            let inner = &rest[nl + 1..];
            let inner = inner.strip_suffix("```").unwrap_or(inner);
            return inner.to_string();
        }
    }
    text.to_string()
}

fn generation_request(purpose: Purpose, brief: String, messages: Vec<String>) -> ModelRequest {
    ModelRequest::new(purpose, GENERATION_SYSTEM, brief).with_messages(messages)
}

/// Asks once, then once more with the rejection reason before failing.
fn generate_checked<T>(
    model: &mut dyn ModelClient,
    purpose: Purpose,
    step: &'static str,
    brief: &str,
    context: Vec<String>,
    check: &mut dyn FnMut(&str) -> Result<T, String>,
) -> Result<T, LifecycleError> {
    let first = model.complete(&generation_request(
        purpose,
        brief.to_string(),
        context.clone(),
    ))?;
    let reason = match check(&first.text) {
        Ok(v) => return Ok(v),
        Err(reason) => reason,
    };
    let mut retry_ctx = context;
    retry_ctx.push(format!(
        "Your previous answer was rejected: {reason}. Try again."
    ));
    let second = model.complete(&generation_request(purpose, brief.to_string(), retry_ctx))?;
    check(&second.text).map_err(|reason| LifecycleError::GenerationInvalid { step, reason })
}

/// Package-relative file paths a plan may create.
fn plannable_path(path: &str) -> Result<String, String> {
    let rel = normalize_sandbox_path(path).map_err(|_| format!("`{path}` escapes the package"))?;
    if Path::new(path).is_absolute() {
        return Err(format!("`{path}` must be relative"));
    }
    let rel = crate::fsutil::rel_to_string(&rel);
    let first = rel.split('/').next().unwrap_or_default();
    if Subdir::from_dir_name(first).is_none() || !rel.contains('/') {
        return Err(format!(
            "`{path}` is not under scripts/, tests/, resources/ or references/"
        ));
    }
    if rel.ends_with(MEMORY_FILE) {
        return Err(format!("`{path}` is reserved"));
    }
    Ok(rel)
}

fn parse_plan(text: &str) -> Result<Vec<String>, String> {
    let v: Value = serde_json::from_str(strip_fence(text).trim())
        .map_err(|e| format!("plan is not JSON: {e}"))?;
    let files = v["files"].as_array().ok_or("plan has no `files` array")?;
    let mut out: Vec<String> = Vec::new();
    for f in files {
        let path = f.as_str().ok_or("plan entries must be strings")?;
        let rel = plannable_path(path)?;
        if !out.contains(&rel) {
            out.push(rel);
        }
    }
    Ok(out)
}

/// Generates a package into `<staging>/<name>/` in three steps: SKILL.md,
/// structure plan, then one call per planned file. Any previous staging of
/// the same name is replaced.
pub fn create_skill(
    spec: &SkillSpec,
    model: &mut dyn ModelClient,
    staging: &Path,
) -> Result<SkillPackage, LifecycleError> {
    let name = spec.resolved_name()?;
    let brief = serde_json::to_string_pretty(&json!({
        "name": name,
        "purpose": spec.purpose,
        "inputs": spec.inputs,
        "expected_outputs": spec.expected_outputs,
    }))
    .expect("spec serializes");

    let skill_md_text = generate_checked(
        model,
        Purpose::CreateSkillMd,
        "SKILL.md",
        &brief,
        vec![format!("Write SKILL.md for the skill named `{name}`.")],
        &mut |text| {
            let text = strip_fence(text);
            parse_skill_md(&text, &name)
                .map(|_| text)
                .map_err(|e| e.to_string())
        },
    )?;

    let files = generate_checked(
        model,
        Purpose::PlanStructure,
        "structure plan",
        &brief,
        vec![
            skill_md_text.clone(),
            "List the files to create as JSON: {\"files\": [\"scripts/...\", \"tests/test_...\"]}"
                .into(),
        ],
        &mut |text| parse_plan(text),
    )?;

    let mut contents = Vec::with_capacity(files.len());
    for path in &files {
        let resp = model.complete(&generation_request(
            Purpose::GenerateFile,
            brief.clone(),
            vec![
                skill_md_text.clone(),
                format!("Write the full contents of `{path}`."),
            ],
        ))?;
        contents.push(strip_fence(&resp.text));
    }

    fs::create_dir_all(staging).map_err(io_err(staging))?;
    let dir = staging.join(&name);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    fs::create_dir(&dir).map_err(io_err(&dir))?;
    fs::write(dir.join(SKILL_MD), &skill_md_text).map_err(io_err(dir.join(SKILL_MD)))?;
    for (path, body) in files.iter().zip(&contents) {
        write_package_file(&dir, path, body)?;
    }
    let report = validate_package(&dir);
    if !report.is_valid() {
        return Err(LifecycleError::GenerationInvalid {
            step: "package",
            reason: report
                .errors
                .iter()
                .map(|f| f.message.clone())
                .collect::<Vec<_>>()
                .join("; "),
        });
    }
    Ok(SkillPackage::load(&dir)?)
}

fn write_package_file(root: &Path, rel: &str, body: &str) -> Result<(), LifecycleError> {
    let dest = root.join(rel);
    if let Some(parent) = dest.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(&dest, body).map_err(io_err(&dest))?;
    #[cfg(unix)]
    if rel.starts_with("scripts/") || rel.starts_with("tests/") {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(&dest, fs::Permissions::from_mode(0o755)).map_err(io_err(&dest))?;
    }
    Ok(())
}

/// Test programs of a package: files under `tests/` whose name starts with
/// `test`, in path order.
pub fn test_programs(pkg: &SkillPackage) -> Vec<String> {
    pkg.subdirs
        .get(&Subdir::Tests)
        .into_iter()
        .flatten()
        .filter(|rel| {
            Path::new(rel.as_str())
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("test"))
        })
        .cloned()
        .collect()
}

fn test_command(pkg_root: &Path, test: &str) -> String {
    let quoted = format!("'{}'", test.replace('\'', r"'\''"));
    let runner = if test.ends_with(".py") {
        format!("python3 {quoted}")
    } else if test.ends_with(".sh") {
        format!("sh {quoted}")
    } else if is_executable(&pkg_root.join(test)) {
        format!("./{quoted}")
    } else {
        format!("sh {quoted}")
    };
    format!("cd {SANDBOX_SKILL_DIR} && {runner}")
}

#[cfg(unix)]
fn is_executable(path: &Path) -> bool {
    use std::os::unix::fs::PermissionsExt;
    fs::metadata(path)
        .map(|m| m.permissions().mode() & 0o111 != 0)
        .unwrap_or(false)
}

#[cfg(not(unix))]
fn is_executable(_: &Path) -> bool {
    false
}

fn clip(text: String, limit: usize) -> String {
    if text.chars().count() <= limit {
        return text;
    }
    text.chars().take(limit).collect()
}

/// Runs every test program of `pkg` in one fresh sandbox. Exit code 0
/// passes; anything else, including a timeout, fails.
pub fn evaluate_skill(
    pkg: &SkillPackage,
    factory: &dyn SandboxFactory,
    timeout: Duration,
) -> Result<EvaluationResult, LifecycleError> {
    let tests = test_programs(pkg);
    let mut result = EvaluationResult::default();
    if tests.is_empty() {
        return Ok(result);
    }
    let mut sandbox = factory.create_sandbox()?;
    let outcome = (|| {
        sandbox.upload_dir(pkg.root(), SANDBOX_SKILL_DIR, &|rel| {
            rel == Path::new(MEMORY_FILE)
        })?;
        for test in &tests {
            let exec = sandbox.run(&test_command(pkg.root(), test), timeout)?;
            result.tests_run += 1;
            if exec.exit_code == 0 && !exec.timed_out {
                result.tests_passed += 1;
            } else {
                let mut output = exec.stdout;
                if !exec.stderr.is_empty() {
                    if !output.is_empty() && !output.ends_with('\n') {
                        output.push('\n');
                    }
                    output.push_str(&exec.stderr);
                }
                result.failures.push(TestFailure {
                    test_file: test.clone(),
                    exit_code: if exec.timed_out {
                        None
                    } else {
                        Some(exec.exit_code)
                    },
                    output: clip(output, FAILURE_OUTPUT_LIMIT),
                    timed_out: exec.timed_out,
                });
            }
        }
        Ok::<(), SandboxError>(())
    })();
    sandbox.close();
    outcome?;
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub package: SkillPackage,
    pub result: EvaluationResult,
    pub rounds: usize,
    pub steps: Vec<PipelineStep>,
}

fn parse_patches(text: &str) -> Result<Vec<(String, String)>, String> {
    let v: Value = serde_json::from_str(strip_fence(text).trim())
        .map_err(|e| format!("patch set is not JSON: {e}"))?;
    let patches = v["patches"]
        .as_object()
        .ok_or("patch set has no `patches` object")?;
    patches
        .iter()
        .map(|(path, content)| {
            content
                .as_str()
                .map(|c| (path.clone(), c.to_string()))
                .ok_or_else(|| format!("patch for `{path}` is not a string"))
        })
        .collect()
}

/// Package-relative path a patch may replace: SKILL.md or a file under a
/// known subdirectory.
fn patchable_path(path: &str) -> Result<String, String> {
    if path == SKILL_MD {
        return Ok(path.to_string());
    }
    plannable_path(path)
}

/// Applies `patches` to a copy of the package and swaps it in only when the
/// result still validates.
fn apply_patches(pkg: &SkillPackage, patches: &[(String, String)]) -> Result<SkillPackage, String> {
    let rels = patches
        .iter()
        .map(|(p, _)| patchable_path(p))
        .collect::<Result<Vec<_>, _>>()?;
    let root = pkg.root().to_path_buf();
    let parent = root.parent().ok_or("package has no parent directory")?;
    let work = tempfile::Builder::new()
        .prefix(".refine-")
        .tempdir_in(parent)
        .map_err(|e| e.to_string())?;
    let candidate = work.path().join(pkg.name());
    crate::fsutil::copy_dir(&root, &candidate).map_err(|e| e.to_string())?;
    for (rel, (_, body)) in rels.iter().zip(patches) {
        write_package_file(&candidate, rel, body).map_err(|e| e.to_string())?;
    }
    let report = validate_package(&candidate);
    if !report.is_valid() {
        return Err(report
            .errors
            .iter()
            .map(|f| f.message.clone())
            .collect::<Vec<_>>()
            .join("; "));
    }
    let backup = work.path().join(".previous");
    fs::rename(&root, &backup).map_err(|e| e.to_string())?;
    if let Err(e) = fs::rename(&candidate, &root) {
        let _ = fs::rename(&backup, &root);
        return Err(e.to_string());
    }
    SkillPackage::load(&root).map_err(|e| e.to_string())
}

/// Feeds failure traces to the model and applies its full-file patches,
/// re-evaluating after each round, until the tests pass or `max_rounds`
/// rounds were spent. Patches outside the package fail the round.
pub fn refine_skill(
    pkg: SkillPackage,
    eval: EvaluationResult,
    model: &mut dyn ModelClient,
    factory: &dyn SandboxFactory,
    max_rounds: usize,
    timeout: Duration,
) -> Result<RefineOutcome, LifecycleError> {
    let mut outcome = RefineOutcome {
        package: pkg,
        result: eval,
        rounds: 0,
        steps: Vec::new(),
    };
    while !outcome.result.all_passed() && outcome.rounds < max_rounds {
        outcome.rounds += 1;
        let round = outcome.rounds;
        let brief = serde_json::to_string_pretty(&json!({
            "skill": outcome.package.name(),
            "files": outcome.package.files(),
            "failures": outcome.result.failures,
        }))
        .expect("failures serialize");
        let skill_md = outcome.package.skill_md.render();
        let patches = generate_checked(
            model,
            Purpose::Refine,
            "patch set",
            &brief,
            vec![
                skill_md,
                "Reply with JSON {\"patches\": {\"<relative path>\": \"<full new contents>\"}}"
                    .into(),
            ],
            &mut |text| parse_patches(text),
        )?;
        let paths: Vec<&str> = patches.iter().map(|(p, _)| p.as_str()).collect();
        match apply_patches(&outcome.package, &patches) {
            Ok(patched) => {
                outcome.steps.push(PipelineStep::new(
                    PipelineStage::Refine,
                    json!({"round": round, "patched": paths}),
                ));
                outcome.package = patched;
                outcome.result = evaluate_skill(&outcome.package, factory, timeout)?;
                outcome.steps.push(PipelineStep::evaluate(&outcome.result));
            }
            Err(reason) => {
                outcome.steps.push(PipelineStep::new(
                    PipelineStage::Refine,
                    json!({"round": round, "rejected": reason, "patched": paths}),
                ));
                let mut step = PipelineStep::evaluate(&outcome.result);
                step.detail["unchanged"] = json!(true);
                outcome.steps.push(step);
            }
        }
    }
    if outcome.result.all_passed() {
        Ok(outcome)
    } else {
        Err(LifecycleError::RefinementExhausted(Box::new(outcome)))
    }
}

/// A finished session as seen for distillation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub session_id: String,
    pub instruction: String,
    /// Turn texts in replay order.
    pub turns: Vec<String>,
    pub meta: RunMeta,
}

impl Trajectory {
    /// Loads a finished session. By default the active chain (what the model
    /// saw, summaries included) is used; `full_history` replays the
    /// original turns instead.
    pub fn from_session(ws: &SessionWorkspace, full_history: bool) -> Result<Self, LifecycleError> {
        let meta = session::read_run_meta(ws)?
            .ok_or_else(|| LifecycleError::SourceNotSuccessful(ws.session_id().to_string()))?;
        let ctx = session::load_snapshot(ws, CompressionBudget::default())?;
        let turns = if full_history {
            ctx.replay_full_history()
                .map(|t| t.iter().map(|p| p.render()).collect())
        } else {
            ctx.active_chain()
                .map(|c| c.into_iter().map(|e| e.text).collect())
        }
        .map_err(|e| SessionError::SnapshotCorrupt(e.to_string()))?;
        Ok(Self {
            session_id: ws.session_id().to_string(),
            instruction: ws.instruction()?,
            turns,
            meta,
        })
    }
}

pub fn provenance_block(session_id: &str) -> String {
    format!("\n## Provenance\nsource_session: {session_id}\n")
}

/// Turns a successful trajectory into a staged package whose body ends with
/// a provenance section naming the source session.
pub fn distill_skill_from_trajectory(
    traj: &Trajectory,
    model: &mut dyn ModelClient,
    staging: &Path,
) -> Result<SkillPackage, LifecycleError> {
    if !traj.meta.succeeded() {
        return Err(LifecycleError::SourceNotSuccessful(traj.session_id.clone()));
    }
    let brief = serde_json::to_string_pretty(traj).expect("trajectory serializes");
    let spec = generate_checked(
        model,
        Purpose::Distill,
        "distilled spec",
        &brief,
        vec!["Describe a reusable skill as JSON {\"purpose\", \"inputs\", \"expected_outputs\", \"name\"}".into()],
        &mut |text| {
            let spec: SkillSpec = serde_json::from_str(strip_fence(text).trim()).map_err(|e| e.to_string())?;
            spec.resolved_name().map_err(|e| e.to_string())?;
            Ok(spec)
        },
    )?;
    let pkg = create_skill(&spec, model, staging)?;
    let mut body = pkg.body().to_string();
    if !body.is_empty() && !body.ends_with('\n') {
        body.push('\n');
    }
    body.push_str(&provenance_block(&traj.session_id));
    let skill_md = SkillMd::new(pkg.skill_md.frontmatter.clone(), body);
    let path = pkg.root().join(SKILL_MD);
    fs::write(&path, skill_md.render()).map_err(io_err(&path))?;
    Ok(SkillPackage::load(pkg.root())?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub max_rounds: usize,
    pub test_timeout: Duration,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            max_rounds: DEFAULT_MAX_ROUNDS,
            test_timeout: EXEC_CODE_TIMEOUT,
        }
    }
}

pub enum PipelineSource<'a> {
    Spec(&'a SkillSpec),
    Trajectory(&'a Trajectory),
    /// An already generated package, e.g. one written by hand.
    Package(SkillPackage),
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub package: Option<SkillPackage>,
    pub evaluation: Option<EvaluationResult>,
    pub registration: Option<RegistrationOutcome>,
    pub steps: Vec<PipelineStep>,
}

impl PipelineOutcome {
    pub fn registered(&self) -> bool {
        self.registration.is_some()
    }

    pub fn stages(&self) -> Vec<PipelineStage> {
        self.steps.iter().map(|s| s.stage).collect()
    }

    pub fn summary(&self) -> Value {
        json!({
            "skill": self.package.as_ref().map(|p| p.name()),
            "registered": self.registered(),
            "evaluation": self.evaluation,
            "steps": self.steps,
        })
    }
}

/// create/distill → evaluate → refine → register. Generation and test
/// failures end in an `abandon` step rather than an error; the staging
/// directory is left in place for inspection and is removed on registration.
pub fn run_pipeline(
    source: PipelineSource<'_>,
    model: &mut dyn ModelClient,
    factory: &dyn SandboxFactory,
    bank: &mut SkillBank,
    staging: &Path,
    opts: PipelineOptions,
) -> Result<PipelineOutcome, LifecycleError> {
    let mut out = PipelineOutcome {
        package: None,
        evaluation: None,
        registration: None,
        steps: Vec::new(),
    };
    let created = match source {
        PipelineSource::Spec(spec) => {
            spec.resolved_name()?;
            create_skill(spec, model, staging)
        }
        PipelineSource::Trajectory(traj) => distill_skill_from_trajectory(traj, model, staging),
        PipelineSource::Package(pkg) => Ok(pkg),
    };
    let pkg = match created {
        Ok(pkg) => pkg,
        Err(e @ (LifecycleError::GenerationInvalid { .. } | LifecycleError::Model(_))) => {
            out.steps.push(PipelineStep::new(
                PipelineStage::Abandon,
                json!({"reason": e.to_string()}),
            ));
            return Ok(out);
        }
        Err(e) => return Err(e),
    };
    out.steps.push(PipelineStep::new(
        PipelineStage::Create,
        json!({"name": pkg.name(), "files": pkg.files()}),
    ));

    let first = evaluate_skill(&pkg, factory, opts.test_timeout)?;
    out.steps.push(PipelineStep::evaluate(&first));
    let (pkg, result) = if first.all_passed() {
        (pkg, first)
    } else {
        match refine_skill(
            pkg,
            first,
            model,
            factory,
            opts.max_rounds,
            opts.test_timeout,
        ) {
            Ok(r) => {
                out.steps.extend(r.steps);
                (r.package, r.result)
            }
            Err(LifecycleError::RefinementExhausted(r)) => {
                out.steps.extend(r.steps);
                out.steps.push(PipelineStep::new(
                    PipelineStage::Abandon,
                    json!({"reason": format!("tests still failing after {} refinement rounds", r.rounds)}),
                ));
                out.package = Some(r.package);
                out.evaluation = Some(r.result);
                return Ok(out);
            }
            Err(e @ (LifecycleError::GenerationInvalid { .. } | LifecycleError::Model(_))) => {
                out.steps.push(PipelineStep::new(
                    PipelineStage::Abandon,
                    json!({"reason": e.to_string()}),
                ));
                return Ok(out);
            }
            Err(e) => return Err(e),
        }
    };

    match bank.register_skill(&pkg, &result) {
        Ok(reg) => {
            out.steps.push(PipelineStep::new(
                PipelineStage::Register,
                json!({"name": reg.name, "already_registered": reg.already_registered, "warnings": reg.warnings}),
            ));
            if pkg.root().starts_with(staging) {
                let _ = fs::remove_dir_all(pkg.root());
            }
            out.package = Some(SkillPackage::load(&reg.path)?);
            out.registration = Some(reg);
        }
        Err(
            e @ (BankError::EvaluationFailed { .. }
            | BankError::DuplicateName(_)
            | BankError::InvalidPackage(_)),
        ) => {
            out.steps.push(PipelineStep::new(
                PipelineStage::Abandon,
                json!({"reason": e.to_string()}),
            ));
            out.package = Some(pkg);
        }
        Err(e) => return Err(e.into()),
    }
    out.evaluation = Some(result);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::model::{Script, ScriptedModel};
    use crate::sandbox::LocalProcessFactory;
    use std::collections::BTreeMap;

    fn model(generation: &[(Purpose, Vec<&str>)]) -> ScriptedModel {
        let mut script = Script {
            summary_bytes: 64,
            ..Default::default()
        };
        script.generation = generation
            .iter()
            .map(|(p, v)| (*p, v.iter().map(|s| s.to_string()).collect()))
            .collect::<BTreeMap<_, _>>();
        ScriptedModel::new(script)
    }

    const SKILL: &str = "---\nname: add-numbers\ndescription: Adds two integers.\n---\n# Add numbers\n\nRun `scripts/add.sh A B`.\n";

    fn spec() -> SkillSpec {
        SkillSpec {
            purpose: "Add numbers".into(),
            inputs: "two ints".into(),
            expected_outputs: "their sum".into(),
            name: None,
        }
    }

    #[test]
    fn slugs() {
        assert_eq!(slugify("Add numbers"), "add-numbers");
        assert_eq!(slugify("  CSV -> Summary!! "), "csv-summary");
        assert_eq!(slugify("???"), "skill");
        assert!(slugify(&"word ".repeat(40)).len() <= 64);
    }

    #[test]
    fn empty_purpose_fails_before_model() {
        let mut m = model(&[]);
        let tmp = tempfile::tempdir().unwrap();
        let spec = SkillSpec {
            purpose: " ".into(),
            ..Default::default()
        };
        assert!(matches!(
            create_skill(&spec, &mut m, tmp.path()),
            Err(LifecycleError::InvalidSpec(_))
        ));
    }

    #[test]
    fn doc_only_skill() {
        let mut m = model(&[
            (Purpose::CreateSkillMd, vec![SKILL]),
            (Purpose::PlanStructure, vec!["{\"files\": []}"]),
        ]);
        let tmp = tempfile::tempdir().unwrap();
        let pkg = create_skill(&spec(), &mut m, tmp.path()).unwrap();
        assert_eq!(pkg.name(), "add-numbers");
        assert_eq!(
            fs::read_to_string(tmp.path().join("add-numbers/SKILL.md")).unwrap(),
            SKILL
        );
        let eval = evaluate_skill(
            &pkg,
            &LocalProcessFactory::default(),
            Duration::from_secs(10),
        )
        .unwrap();
        assert!(eval.unevaluated() && eval.all_passed());
    }

    #[test]
    fn reask_once_then_fail() {
        let bad = "---\nname: other-name\ndescription: x\n---\nbody\n";
        let mut m = model(&[
            (Purpose::CreateSkillMd, vec![bad, SKILL]),
            (
                Purpose::PlanStructure,
                vec!["```json\n{\"files\": []}\n```"],
            ),
        ]);
        let tmp = tempfile::tempdir().unwrap();
        assert!(create_skill(&spec(), &mut m, tmp.path()).is_ok());

        let mut m = model(&[(Purpose::CreateSkillMd, vec![bad, bad, SKILL])]);
        assert!(matches!(
            create_skill(&spec(), &mut m, tmp.path()),
            Err(LifecycleError::GenerationInvalid {
                step: "SKILL.md",
                ..
            })
        ));
    }

    #[test]
    fn plan_rejects_escapes() {
        assert!(parse_plan("{\"files\": [\"../x\"]}").is_err());
        assert!(parse_plan("{\"files\": [\"scripts/../../x\"]}").is_err());
        assert!(parse_plan("{\"files\": [\"other/x\"]}").is_err());
        assert!(parse_plan("{\"files\": [\"scripts\"]}").is_err());
        assert_eq!(
            parse_plan("{\"files\": [\"./scripts/a.sh\", \"scripts/a.sh\"]}").unwrap(),
            ["scripts/a.sh"]
        );
    }

    fn buggy_model(fixes: Vec<&str>) -> ScriptedModel {
        model(&[
            (Purpose::CreateSkillMd, vec![SKILL]),
            (Purpose::PlanStructure, vec!["{\"files\": [\"scripts/add.sh\", \"tests/test_add.sh\", \"tests/test_usage.sh\"]}"]),
            (
                Purpose::GenerateFile,
                vec![
                    "echo $(($1 - $2))\n",
                    "[ \"$(sh scripts/add.sh 2 3)\" = 5 ] || { echo \"expected 5, got $(sh scripts/add.sh 2 3)\"; exit 1; }\n",
                    "sh scripts/add.sh 1 1 >/dev/null\n",
                ],
            ),
            (Purpose::Refine, fixes),
        ])
    }

    #[test]
    fn evaluate_refine_register() {
        let tmp = tempfile::tempdir().unwrap();
        let staging = tmp.path().join("staging");
        let factory = LocalProcessFactory::default();
        let mut m = buggy_model(vec![
            "{\"patches\": {\"scripts/add.sh\": \"echo $(($1 + $2))\\n\"}}",
        ]);
        let pkg = create_skill(&spec(), &mut m, &staging).unwrap();
        let eval = evaluate_skill(&pkg, &factory, Duration::from_secs(10)).unwrap();
        assert_eq!((eval.tests_run, eval.tests_passed), (2, 1));
        assert_eq!(eval.failures[0].test_file, "tests/test_add.sh");
        assert_eq!(eval.failures[0].exit_code, Some(1));
        assert!(eval.failures[0].output.contains("expected 5, got -1"));

        let refined =
            refine_skill(pkg, eval, &mut m, &factory, 3, Duration::from_secs(10)).unwrap();
        assert_eq!(refined.rounds, 1);
        assert!(refined.result.all_passed());
        assert_eq!(
            fs::read_to_string(refined.package.root().join("scripts/add.sh")).unwrap(),
            "echo $(($1 + $2))\n"
        );
    }

    #[test]
    fn refinement_exhausts_and_contains_patches() {
        let tmp = tempfile::tempdir().unwrap();
        let staging = tmp.path().join("staging");
        let factory = LocalProcessFactory::default();
        let outside = "{\"patches\": {\"../evil.sh\": \"x\"}}";
        let noop = "{\"patches\": {\"scripts/add.sh\": \"echo 0\\n\"}}";
        let mut m = buggy_model(vec![outside, noop, noop]);
        let pkg = create_skill(&spec(), &mut m, &staging).unwrap();
        let eval = evaluate_skill(&pkg, &factory, Duration::from_secs(10)).unwrap();
        let err = refine_skill(
            pkg,
            eval,
            &mut m,
            &factory,
            DEFAULT_MAX_ROUNDS,
            Duration::from_secs(10),
        )
        .unwrap_err();
        let LifecycleError::RefinementExhausted(r) = err else {
            panic!("{err}")
        };
        assert_eq!(r.rounds, 3);
        assert!(r.steps[0].detail["rejected"].is_string());
        assert!(!staging.join("evil.sh").exists() && !tmp.path().join("evil.sh").exists());
        let stages: Vec<_> = r.steps.iter().map(|s| s.stage).collect();
        assert_eq!(
            stages,
            [PipelineStage::Refine, PipelineStage::Evaluate].repeat(3)
        );
    }

    #[test]
    fn timeout_counts_as_failure() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("slow");
        fs::create_dir_all(dir.join("tests")).unwrap();
        fs::write(
            dir.join("SKILL.md"),
            "---\nname: slow\ndescription: sleeps\n---\n",
        )
        .unwrap();
        fs::write(dir.join("tests/test_sleep.sh"), "sleep 30\n").unwrap();
        let pkg = SkillPackage::load(&dir).unwrap();
        let eval = evaluate_skill(
            &pkg,
            &LocalProcessFactory::default(),
            Duration::from_millis(300),
        )
        .unwrap();
        assert_eq!((eval.tests_run, eval.tests_passed), (1, 0));
        assert!(eval.failures[0].timed_out);
        assert_eq!(eval.failures[0].exit_code, None);
    }

    #[test]
    fn pipeline_gates_registration() {
        let tmp = tempfile::tempdir().unwrap();
        let staging = tmp.path().join("staging");
        let factory = LocalProcessFactory::default();
        let clock: std::sync::Arc<dyn crate::Clock> = std::sync::Arc::new(crate::SystemClock);
        let mut bank = SkillBank::open(tmp.path().join("skills"), clock).unwrap();

        let mut never = buggy_model(vec![
            "{\"patches\": {\"scripts/add.sh\": \"echo 0\\n\"}}";
            3
        ]);
        let out = run_pipeline(
            PipelineSource::Spec(&spec()),
            &mut never,
            &factory,
            &mut bank,
            &staging,
            PipelineOptions::default(),
        )
        .unwrap();
        assert!(!out.registered());
        assert_eq!(out.stages().last(), Some(&PipelineStage::Abandon));
        assert!(!bank.contains("add-numbers"));

        let mut fixing = buggy_model(vec![
            "{\"patches\": {\"scripts/add.sh\": \"echo $(($1 + $2))\\n\"}}",
        ]);
        let out = run_pipeline(
            PipelineSource::Spec(&spec()),
            &mut fixing,
            &factory,
            &mut bank,
            &staging,
            PipelineOptions::default(),
        )
        .unwrap();
        assert!(out.registered());
        assert_eq!(
            out.stages(),
            [
                PipelineStage::Create,
                PipelineStage::Evaluate,
                PipelineStage::Refine,
                PipelineStage::Evaluate,
                PipelineStage::Register
            ]
        );
        assert!(bank.contains("add-numbers"));
        assert!(!staging.join("add-numbers").exists());
    }
}
