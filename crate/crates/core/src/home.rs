//! Agent home directory layout.
//!
//! ```text
//! <home>/
//!   skills/                      skill bank, one directory per skill
//!   memory/long_term_memory/memory.md
//!   sessions/<session_id>/
//!   staging/<name>/              packages being created or refined
//!   config.toml                  optional model/timeouts configuration
//! ```

use std::io;
use std::path::{Path, PathBuf};

/// Environment variable that overrides the default home location.
pub const HOME_ENV: &str = "AUTOSKILL_HOME";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentHome {
    root: PathBuf,
}

impl AgentHome {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `$AUTOSKILL_HOME`, falling back to `$HOME/.autoskill`.
    pub fn from_env() -> Self {
        if let Some(dir) = std::env::var_os(HOME_ENV).filter(|v| !v.is_empty()) {
            return Self::new(dir);
        }
        let base = std::env::var_os("HOME")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."));
        Self::new(base.join(".autoskill"))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn skills_dir(&self) -> PathBuf {
        self.root.join("skills")
    }

    pub fn long_term_memory_dir(&self) -> PathBuf {
        self.root.join("memory").join("long_term_memory")
    }

    pub fn long_term_memory(&self) -> PathBuf {
        self.long_term_memory_dir().join("memory.md")
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.root.join("sessions")
    }

    pub fn staging_dir(&self) -> PathBuf {
        self.root.join("staging")
    }

    pub fn config_file(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    /// Creates the scaffold. Existing content is left alone.
    pub fn init(&self) -> io::Result<()> {
        std::fs::create_dir_all(self.skills_dir())?;
        std::fs::create_dir_all(self.long_term_memory_dir())?;
        std::fs::create_dir_all(self.sessions_dir())?;
        Ok(())
    }

    pub fn is_initialized(&self) -> bool {
        self.skills_dir().is_dir()
            && self.sessions_dir().is_dir()
            && self.long_term_memory_dir().is_dir()
    }
}
