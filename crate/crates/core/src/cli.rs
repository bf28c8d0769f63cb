//! Command-line interface.
//!
//! Inspection commands print JSON on stdout (`--plain` prints tables);
//! diagnostics go to stderr. Exit codes: 0 success, 1 domain error, 2 usage
//! error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::agent::{
    resume_task, run_task, AgentConfig, AgentDeps, LoopConfig, ModelClient, RunStatus,
    ScriptedModel,
};
use crate::clock::{Clock, SystemClock};
use crate::home::AgentHome;
use crate::lifecycle::{
    evaluate_skill, run_pipeline, PipelineOptions, PipelineOutcome, PipelineSource, SkillSpec,
    Trajectory,
};
use crate::sandbox::LocalProcessFactory;
use crate::session::{self, create_session, open_session, RESULT_OUTPUT_FILES};
use crate::skill_bank::{
    PrunePolicy, SkillBank, DEFAULT_CONSECUTIVE_FAILURES, DEFAULT_UNUSED_SESSIONS,
};
use crate::skill_package::{validate_package, SkillPackage, SKILL_MD};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "autoskill", version, about = "Skill-lifecycle agent runtime")]
pub struct Cli {
    /// Agent home directory (overrides $AUTOSKILL_HOME).
    #[arg(long, global = true)]
    pub home: Option<PathBuf>,
    /// `scripted:<fixture.json>` or `remote` (reads <home>/config.toml).
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Human-readable tables instead of JSON.
    #[arg(long, global = true)]
    pub plain: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create the home scaffold.
    Init,
    /// Validate, create, evaluate, register or distill skill packages.
    #[command(subcommand)]
    Skill(SkillCommand),
    /// Print the skill catalog as YAML (`--json` for JSON).
    Catalog {
        #[arg(long)]
        json: bool,
    },
    /// Run or resume an agent session.
    #[command(subcommand)]
    Session(SessionCommand),
    /// Print a session's events.jsonl unmodified.
    Events { session: String },
    /// Print every original turn of a session, ignoring compression.
    Replay { session: String },
    /// Remove stale or failing skills from the bank.
    Prune {
        #[arg(long, default_value_t = DEFAULT_UNUSED_SESSIONS)]
        unused: usize,
        #[arg(long, default_value_t = DEFAULT_CONSECUTIVE_FAILURES)]
        fails: u32,
    },
}

#[derive(Debug, Subcommand)]
pub enum SkillCommand {
    /// Check a package directory against the format rules.
    Validate { dir: PathBuf },
    /// Generate, test, refine and register a skill from a JSON spec.
    Create {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Evaluate a package and register it if its tests pass.
    Register { dir: PathBuf },
    /// Run a package's tests in a fresh sandbox.
    Evaluate { dir: PathBuf },
    /// Distill a skill from a successful session.
    Distill {
        #[arg(long)]
        session: String,
        /// Use every original turn instead of the compressed chain.
        #[arg(long)]
        full_history: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum SessionCommand {
    Run(RunArgs),
    Resume {
        id: String,
        #[arg(long)]
        max_turns: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Markdown file with the task instruction.
    #[arg(long)]
    pub instruction: PathBuf,
    /// A file or directory copied into the session's submitted inputs.
    #[arg(long)]
    pub inputs: Option<PathBuf>,
    /// A skill package, or a directory of packages, to inject.
    #[arg(long)]
    pub skills: Option<PathBuf>,
    /// Session id; a random 32-hex id by default.
    #[arg(long)]
    pub session_id: Option<String>,
    /// Turn limit for this run.
    #[arg(long)]
    pub max_turns: Option<usize>,
}

/// An error with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn domain(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_DOMAIN,
            message: e.to_string(),
        }
    }
}

type CliResult = Result<i32, CliError>;

struct Ctx<'w> {
    home: AgentHome,
    model: Option<String>,
    plain: bool,
    clock: Arc<dyn Clock>,
    out: &'w mut dyn Write,
}

impl Ctx<'_> {
    fn print_json(&mut self, value: &impl Serialize) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).expect("serializable");
        writeln!(self.out, "{text}").map_err(CliError::domain)
    }

    fn print(&mut self, text: &str) -> Result<(), CliError> {
        self.out
            .write_all(text.as_bytes())
            .map_err(CliError::domain)
    }

    fn bank(&self) -> Result<SkillBank, CliError> {
        self.require_home()?;
        SkillBank::open(self.home.skills_dir(), self.clock.clone()).map_err(CliError::domain)
    }

    fn require_home(&self) -> Result<(), CliError> {
        if self.home.is_initialized() {
            Ok(())
        } else {
            Err(CliError::domain(format!(
                "agent home {} is not initialized; run `autoskill init`",
                self.home.root().display()
            )))
        }
    }

    fn config(&self) -> Result<AgentConfig, CliError> {
        AgentConfig::load(&self.home.config_file()).map_err(CliError::domain)
    }

    fn loop_config(&self, max_turns: Option<usize>) -> Result<LoopConfig, CliError> {
        let mut cfg = self.config()?.loop_config().map_err(CliError::domain)?;
        if let Some(n) = max_turns {
            cfg.max_turns = n;
        }
        cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(cfg)
    }

    fn model(&self) -> Result<Box<dyn ModelClient>, CliError> {
        match self.model.as_deref() {
            None => Err(CliError::usage(
                "this command needs --model scripted:<fixture> or --model remote",
            )),
            Some("remote") => Ok(Box::new(
                self.config()?.remote_client().map_err(CliError::domain)?,
            )),
            Some(spec) => match spec.strip_prefix("scripted:") {
                Some(path) => Ok(Box::new(
                    ScriptedModel::from_file(Path::new(path)).map_err(CliError::domain)?,
                )),
                None => Err(CliError::usage(format!(
                    "unknown model `{spec}`; expected scripted:<fixture> or remote"
                ))),
            },
        }
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(rendered.as_bytes())
            } else {
                err.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

pub fn dispatch(cli: Cli, out: &mut dyn Write) -> CliResult {
    let home = cli
        .home
        .map(AgentHome::new)
        .unwrap_or_else(AgentHome::from_env);
    let mut ctx = Ctx {
        home,
        model: cli.model,
        plain: cli.plain,
        clock: Arc::new(SystemClock),
        out,
    };
    match cli.command {
        Command::Init => {
            ctx.home.init().map_err(CliError::domain)?;
            let root = ctx.home.root().display().to_string();
            ctx.print_json(&json!({"home": root}))?;
            Ok(EXIT_OK)
        }
        Command::Skill(cmd) => skill(&mut ctx, cmd),
        Command::Catalog { json } => {
            let catalog = ctx.bank()?.build_catalog();
            if json {
                ctx.print_json(&catalog.entries)?;
            } else if ctx.plain {
                let rows: String = catalog
                    .entries
                    .iter()
                    .map(|e| format!("{:<32} {}\n", e.name, e.description))
                    .collect();
                ctx.print(&rows)?;
            } else {
                ctx.print(&catalog.to_yaml())?;
            }
            Ok(EXIT_OK)
        }
        Command::Session(SessionCommand::Run(args)) => session_run(&mut ctx, args),
        Command::Session(SessionCommand::Resume { id, max_turns }) => {
            ctx.require_home()?;
            let cfg = ctx.loop_config(max_turns)?;
            let mut model = ctx.model()?;
            let ws = open_session(&ctx.home, &id).map_err(CliError::domain)?;
            let mut bank = ctx.bank()?;
            let mut deps = AgentDeps::new(ctx.clock.clone());
            let status = resume_task(&ctx.home, &id, &mut bank, &mut *model, &cfg, &mut deps)
                .map_err(CliError::domain)?;
            report_status(&mut ctx, &ws, status)
        }
        Command::Events { session } => {
            ctx.require_home()?;
            let ws = open_session(&ctx.home, &session).map_err(CliError::domain)?;
            let bytes = fs::read(ws.path(session::EVENTS_JSONL)).map_err(CliError::domain)?;
            ctx.out.write_all(&bytes).map_err(CliError::domain)?;
            Ok(EXIT_OK)
        }
        Command::Replay { session } => {
            ctx.require_home()?;
            let ws = open_session(&ctx.home, &session).map_err(CliError::domain)?;
            let snap = session::load_snapshot(&ws, LoopConfig::default().budget)
                .map_err(CliError::domain)?;
            let turns = snap.replay_full_history().map_err(CliError::domain)?;
            if ctx.plain {
                let text: String = turns
                    .iter()
                    .enumerate()
                    .map(|(i, t)| format!("=== turn {} ===\n{}\n", i + 1, t.render()))
                    .collect();
                ctx.print(&text)?;
            } else {
                ctx.print_json(&turns)?;
            }
            Ok(EXIT_OK)
        }
        Command::Prune { unused, fails } => {
            let mut bank = ctx.bank()?;
            let removed = bank
                .prune_skills(PrunePolicy {
                    unused_sessions: unused,
                    consecutive_failures: fails,
                })
                .map_err(CliError::domain)?;
            ctx.print_json(&json!({"removed": removed}))?;
            Ok(EXIT_OK)
        }
    }
}

fn load_package(dir: &Path) -> Result<SkillPackage, CliError> {
    SkillPackage::load(dir).map_err(CliError::domain)
}

fn print_outcome(ctx: &mut Ctx<'_>, outcome: &PipelineOutcome) -> CliResult {
    ctx.print_json(&outcome.summary())?;
    Ok(if outcome.registered() {
        EXIT_OK
    } else {
        EXIT_DOMAIN
    })
}

fn skill(ctx: &mut Ctx<'_>, cmd: SkillCommand) -> CliResult {
    match cmd {
        SkillCommand::Validate { dir } => {
            let report = validate_package(&dir);
            if ctx.plain {
                let mut text = String::new();
                for f in report.errors.iter() {
                    text.push_str(&format!("error    {}\n", f.message));
                }
                for f in report.warnings.iter() {
                    text.push_str(&format!("warning  {}\n", f.message));
                }
                text.push_str(if report.is_valid() {
                    "valid\n"
                } else {
                    "invalid\n"
                });
                ctx.print(&text)?;
            } else {
                ctx.print_json(&json!({"valid": report.is_valid(), "errors": report.errors, "warnings": report.warnings}))?;
            }
            Ok(if report.is_valid() {
                EXIT_OK
            } else {
                EXIT_DOMAIN
            })
        }
        SkillCommand::Evaluate { dir } => {
            let pkg = load_package(&dir)?;
            let result = evaluate_skill(
                &pkg,
                &LocalProcessFactory::default(),
                ctx.loop_config(None)?.exec_code_timeout,
            )
            .map_err(CliError::domain)?;
            ctx.print_json(&result)?;
            Ok(if result.all_passed() {
                EXIT_OK
            } else {
                EXIT_DOMAIN
            })
        }
        SkillCommand::Register { dir } => {
            let pkg = load_package(&dir)?;
            let mut bank = ctx.bank()?;
            let timeout = ctx.loop_config(None)?.exec_code_timeout;
            let result = evaluate_skill(&pkg, &LocalProcessFactory::default(), timeout)
                .map_err(CliError::domain)?;
            match bank.register_skill(&pkg, &result) {
                Ok(reg) => {
                    ctx.print_json(
                        &json!({"registered": true, "registration": reg, "evaluation": result}),
                    )?;
                    Ok(EXIT_OK)
                }
                Err(e) => {
                    ctx.print_json(&json!({"registered": false, "reason": e.to_string(), "evaluation": result}))?;
                    Ok(EXIT_DOMAIN)
                }
            }
        }
        SkillCommand::Create { spec } => {
            let text = fs::read_to_string(&spec)
                .map_err(|e| CliError::domain(format!("{}: {e}", spec.display())))?;
            let spec: SkillSpec = serde_json::from_str(&text)
                .map_err(|e| CliError::domain(format!("invalid spec: {e}")))?;
            let mut bank = ctx.bank()?;
            let cfg = ctx.loop_config(None)?;
            let mut model = ctx.model()?;
            let opts = PipelineOptions {
                max_rounds: cfg.max_refine_rounds,
                test_timeout: cfg.exec_code_timeout,
            };
            let outcome = run_pipeline(
                PipelineSource::Spec(&spec),
                &mut *model,
                &LocalProcessFactory::default(),
                &mut bank,
                &ctx.home.staging_dir(),
                opts,
            )
            .map_err(CliError::domain)?;
            print_outcome(ctx, &outcome)
        }
        SkillCommand::Distill {
            session,
            full_history,
        } => {
            ctx.require_home()?;
            let ws = open_session(&ctx.home, &session).map_err(CliError::domain)?;
            let traj = Trajectory::from_session(&ws, full_history).map_err(CliError::domain)?;
            let mut bank = ctx.bank()?;
            let cfg = ctx.loop_config(None)?;
            let mut model = ctx.model()?;
            let opts = PipelineOptions {
                max_rounds: cfg.max_refine_rounds,
                test_timeout: cfg.exec_code_timeout,
            };
            let outcome = run_pipeline(
                PipelineSource::Trajectory(&traj),
                &mut *model,
                &LocalProcessFactory::default(),
                &mut bank,
                &ctx.home.staging_dir(),
                opts,
            )
            .map_err(CliError::domain)?;
            print_outcome(ctx, &outcome)
        }
    }
}

fn injected_skills(path: &Path) -> Result<Vec<SkillPackage>, CliError> {
    if path.join(SKILL_MD).is_file() {
        return Ok(vec![load_package(path)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| CliError::domain(format!("{}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SKILL_MD).is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_package(d)).collect()
}

fn session_run(ctx: &mut Ctx<'_>, args: RunArgs) -> CliResult {
    ctx.require_home()?;
    let cfg = ctx.loop_config(args.max_turns)?;
    let mut model = ctx.model()?;
    let instruction = fs::read_to_string(&args.instruction)
        .map_err(|e| CliError::domain(format!("{}: {e}", args.instruction.display())))?;
    let skills = match &args.skills {
        Some(p) => injected_skills(p)?,
        None => Vec::new(),
    };
    let inputs: Vec<PathBuf> = args.inputs.into_iter().collect();
    let ws = create_session(
        &ctx.home,
        &instruction,
        &inputs,
        &skills,
        args.session_id.as_deref(),
    )
    .map_err(CliError::domain)?;
    let mut bank = ctx.bank()?;
    let mut deps = AgentDeps::new(ctx.clock.clone());
    let status = run_task(&ctx.home, &ws, &mut bank, &mut *model, &cfg, &mut deps)
        .map_err(|e| CliError::domain(format!("session {}: {e}", ws.session_id())))?;
    report_status(ctx, &ws, status)
}

fn report_status(
    ctx: &mut Ctx<'_>,
    ws: &session::SessionWorkspace,
    status: RunStatus,
) -> CliResult {
    match status {
        RunStatus::Finished(meta) => {
            let outputs = ws.path(RESULT_OUTPUT_FILES).display().to_string();
            if ctx.plain {
                let text = format!(
                    "session  {}\nsuccess  {}\nturns    {}\noutputs  {}\n",
                    ws.session_id(),
                    meta.succeeded(),
                    meta.turn_count,
                    outputs
                );
                ctx.print(&text)?;
            } else {
                ctx.print_json(&json!({"session": ws.session_id(), "status": "finished", "run_meta": meta, "outputs": outputs}))?;
            }
            Ok(if meta.succeeded() {
                EXIT_OK
            } else {
                EXIT_DOMAIN
            })
        }
        RunStatus::Paused { turn_count } => {
            ctx.print_json(
                &json!({"session": ws.session_id(), "status": "paused", "turn_count": turn_count}),
            )?;
            Ok(EXIT_OK)
        }
    }
}
