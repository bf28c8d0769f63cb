//! Sandboxes for skill execution.
//!
//! Each sandbox presents a private filesystem root (addressed as `/sandbox`
//! by the agent) with `inputs/` and `outputs/`. The built-in
//! [`LocalProcessFactory`] backs every sandbox with its own temporary
//! directory, runs commands through `/bin/sh` with that directory as working
//! directory and an allow-listed environment, and kills the whole process
//! group on timeout.
//!
//! The local backend confines paths and working directories only. It is not
//! kernel isolation: a command can still read or write anywhere the host user
//! can. Use a container-backed [`SandboxFactory`] where that matters.

use std::fs;
use std::io::{self, Read};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;

/// Default `sandbox_run` deadline.
pub const EXEC_CODE_TIMEOUT: Duration = Duration::from_secs(60);
/// Extra time allowed between the deadline and the reaped process.
pub const KILL_GRACE: Duration = Duration::from_secs(5);
/// Exit code reported for a command killed at its deadline (128 + SIGKILL).
pub const KILLED_EXIT_CODE: i32 = 137;

/// Virtual mount point the agent uses for sandbox paths.
pub const SANDBOX_MOUNT: &str = "/sandbox";

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("sandbox backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("sandbox {0} is closed")]
    SandboxClosed(String),
    #[error("path `{0}` escapes the sandbox root")]
    PathEscape(String),
    #[error("`{0}` not found in sandbox")]
    NotFound(String),
    #[error("io failure at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> SandboxError {
    let path = path.into();
    move |source| SandboxError::Io { path, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SandboxState {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExecResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    #[serde(skip)]
    pub duration: Duration,
    pub timed_out: bool,
}

/// A sandbox instance, whatever backs it.
pub trait Sandbox: Send {
    fn id(&self) -> &str;
    fn state(&self) -> SandboxState;
    /// Runs `command` with the sandbox root as working directory.
    fn run(&mut self, command: &str, timeout: Duration) -> Result<ExecResult, SandboxError>;
    /// Copies a host file in. `dest_rel` defaults to `inputs/<file name>`.
    /// Returns the sandbox-relative destination.
    fn upload(&mut self, host_file: &Path, dest_rel: Option<&str>) -> Result<String, SandboxError>;
    /// Copies a host directory in under `dest_rel`.
    fn upload_dir(
        &mut self,
        host_dir: &Path,
        dest_rel: &str,
        skip: &dyn Fn(&Path) -> bool,
    ) -> Result<String, SandboxError>;
    fn download(&self, src_rel: &str) -> Result<Vec<u8>, SandboxError>;
    /// Destroys the sandbox. Idempotent.
    fn close(&mut self);
}

/// Creates sandboxes. Local processes, containers or a remote service can all
/// sit behind this.
pub trait SandboxFactory: Send + Sync {
    fn create_sandbox(&self) -> Result<Box<dyn Sandbox>, SandboxError>;
}

/// Normalizes a sandbox path lexically and returns it relative to the root.
/// Accepts relative paths and absolute paths under `/sandbox`.
pub fn normalize_sandbox_path(path: &str) -> Result<PathBuf, SandboxError> {
    let escape = || SandboxError::PathEscape(path.to_string());
    let p = Path::new(path);
    let rel: &Path = if p.is_absolute() {
        p.strip_prefix(SANDBOX_MOUNT).map_err(|_| escape())?
    } else {
        p
    };
    let mut out = PathBuf::new();
    for comp in rel.components() {
        match comp {
            Component::Normal(c) => out.push(c),
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    return Err(escape());
                }
            }
            Component::RootDir | Component::Prefix(_) => return Err(escape()),
        }
    }
    Ok(out)
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
pub struct LocalProcessFactory {
    base_dir: Option<PathBuf>,
    shell: PathBuf,
}

impl Default for LocalProcessFactory {
    fn default() -> Self {
        Self {
            base_dir: None,
            shell: PathBuf::from("/bin/sh"),
        }
    }
}

impl LocalProcessFactory {
    /// Sandboxes are created under `base_dir` instead of the system temp dir.
    pub fn with_base_dir(mut self, base_dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(base_dir.into());
        self
    }

    pub fn with_shell(mut self, shell: impl Into<PathBuf>) -> Self {
        self.shell = shell.into();
        self
    }
}

impl SandboxFactory for LocalProcessFactory {
    fn create_sandbox(&self) -> Result<Box<dyn Sandbox>, SandboxError> {
        Ok(Box::new(LocalSandbox::create(self)?))
    }
}

#[derive(Debug)]
pub struct LocalSandbox {
    id: String,
    dir: Option<tempfile::TempDir>,
    shell: PathBuf,
}

impl LocalSandbox {
    fn create(factory: &LocalProcessFactory) -> Result<Self, SandboxError> {
        if !factory.shell.is_file() {
            return Err(SandboxError::BackendUnavailable(format!(
                "shell {} not found",
                factory.shell.display()
            )));
        }
        let builder = {
            let mut b = tempfile::Builder::new();
            b.prefix("sandbox-");
            b
        };
        let dir = match &factory.base_dir {
            Some(base) => {
                fs::create_dir_all(base).map_err(|e| {
                    SandboxError::BackendUnavailable(format!("{}: {e}", base.display()))
                })?;
                builder.tempdir_in(base)
            }
            None => builder.tempdir(),
        }
        .map_err(|e| SandboxError::BackendUnavailable(e.to_string()))?;
        for sub in ["inputs", "outputs"] {
            fs::create_dir(dir.path().join(sub)).map_err(io_err(dir.path().join(sub)))?;
        }
        let id = format!(
            "sbx-{}-{}",
            std::process::id(),
            NEXT_ID.fetch_add(1, Ordering::Relaxed)
        );
        Ok(Self {
            id,
            dir: Some(dir),
            shell: factory.shell.clone(),
        })
    }

    /// Host path of the sandbox root while open.
    pub fn root(&self) -> Option<&Path> {
        self.dir.as_ref().map(|d| d.path())
    }

    fn open_root(&self) -> Result<&Path, SandboxError> {
        self.root()
            .ok_or_else(|| SandboxError::SandboxClosed(self.id.clone()))
    }

    /// Resolves a sandbox path to a host path inside the root, rejecting
    /// lexical escapes and symlinks that lead outside.
    fn resolve(&self, path: &str) -> Result<PathBuf, SandboxError> {
        let root = self.open_root()?;
        let rel = normalize_sandbox_path(path)?;
        let host = root.join(&rel);
        let canonical_root = root.canonicalize().map_err(io_err(root))?;
        // Check the deepest existing ancestor so symlinked directories cannot leak.
        let mut probe = host.clone();
        while !probe.exists() {
            if !probe.pop() {
                break;
            }
        }
        let canonical = probe.canonicalize().map_err(io_err(&probe))?;
        if !canonical.starts_with(&canonical_root) {
            return Err(SandboxError::PathEscape(path.to_string()));
        }
        Ok(host)
    }
}

impl Sandbox for LocalSandbox {
    fn id(&self) -> &str {
        &self.id
    }

    fn state(&self) -> SandboxState {
        if self.dir.is_some() {
            SandboxState::Open
        } else {
            SandboxState::Closed
        }
    }

    fn run(&mut self, command: &str, timeout: Duration) -> Result<ExecResult, SandboxError> {
        let root = self.open_root()?.to_path_buf();
        let tmp = root.join(".tmp");
        fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;
        let mut cmd = Command::new(&self.shell);
        cmd.arg("-c")
            .arg(command)
            .current_dir(&root)
            .env_clear()
            .env(
                "PATH",
                std::env::var_os("PATH").unwrap_or_else(|| "/usr/local/bin:/usr/bin:/bin".into()),
            )
            .env("HOME", &root)
            .env("TMPDIR", &tmp)
            .env("LANG", "C.UTF-8")
            .env("LC_ALL", "C.UTF-8")
            .env("SANDBOX_ROOT", &root)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        run_with_timeout(cmd, timeout).map_err(io_err(&root))
    }

    fn upload(&mut self, host_file: &Path, dest_rel: Option<&str>) -> Result<String, SandboxError> {
        self.open_root()?;
        let default_dest;
        let dest_rel = match dest_rel {
            Some(d) => d,
            None => {
                let name = host_file
                    .file_name()
                    .ok_or_else(|| SandboxError::NotFound(host_file.display().to_string()))?
                    .to_string_lossy();
                default_dest = format!("inputs/{name}");
                &default_dest
            }
        };
        let dest = self.resolve(dest_rel)?;
        if !host_file.is_file() {
            return Err(SandboxError::NotFound(host_file.display().to_string()));
        }
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::copy(host_file, &dest).map_err(io_err(&dest))?;
        Ok(crate::fsutil::rel_to_string(&normalize_sandbox_path(
            dest_rel,
        )?))
    }

    fn upload_dir(
        &mut self,
        host_dir: &Path,
        dest_rel: &str,
        skip: &dyn Fn(&Path) -> bool,
    ) -> Result<String, SandboxError> {
        let dest = self.resolve(dest_rel)?;
        if !host_dir.is_dir() {
            return Err(SandboxError::NotFound(host_dir.display().to_string()));
        }
        crate::fsutil::copy_dir_filtered(host_dir, &dest, skip).map_err(io_err(&dest))?;
        Ok(crate::fsutil::rel_to_string(&normalize_sandbox_path(
            dest_rel,
        )?))
    }

    fn download(&self, src_rel: &str) -> Result<Vec<u8>, SandboxError> {
        let src = self.resolve(src_rel)?;
        if !src.is_file() {
            return Err(SandboxError::NotFound(src_rel.to_string()));
        }
        fs::read(&src).map_err(io_err(&src))
    }

    fn close(&mut self) {
        if let Some(dir) = self.dir.take() {
            let _ = dir.close();
        }
    }
}

impl Drop for LocalSandbox {
    fn drop(&mut self) {
        self.close();
    }
}

/// Spawns `cmd` (which must be in its own process group), captures output and
/// kills the group if it outlives `timeout`.
pub(crate) fn run_with_timeout(mut cmd: Command, timeout: Duration) -> io::Result<ExecResult> {
    let start = Instant::now();
    let mut child = cmd.spawn()?;
    let pgid = child.id() as i32;
    let mut stdout = child.stdout.take().expect("stdout piped");
    let mut stderr = child.stderr.take().expect("stderr piped");
    let out_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stdout.read_to_end(&mut buf);
        buf
    });
    let err_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stderr.read_to_end(&mut buf);
        buf
    });

    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if start.elapsed() >= timeout {
            timed_out = true;
            // SAFETY: killpg only sends a signal; pgid is the group we created.
            unsafe {
                libc::killpg(pgid, libc::SIGKILL);
            }
            break child.wait()?;
        }
        thread::sleep(Duration::from_millis(10));
    };
    // Reap stragglers that still hold the pipes after the leader exited.
    unsafe {
        libc::killpg(pgid, libc::SIGKILL);
    }
    let stdout = out_reader.join().unwrap_or_default();
    let stderr = err_reader.join().unwrap_or_default();
    let exit_code = if timed_out {
        KILLED_EXIT_CODE
    } else {
        status
            .code()
            .unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
    };
    Ok(ExecResult {
        exit_code,
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr: String::from_utf8_lossy(&stderr).into_owned(),
        duration: start.elapsed(),
        timed_out,
    })
}
