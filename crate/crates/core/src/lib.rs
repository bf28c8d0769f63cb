//! # autoskill
//!
//! A skill-centric agent runtime. Agents solve tasks in a plan / act / observe
//! loop, grow a bank of reusable skills through a create → evaluate → register
//! pipeline, keep notes in three append-only memory tiers, and hold their
//! conversation as a DAG that can be compressed without losing the original
//! turns.
//!
//! ## Components
//!
//! - [`skill_package`]: the on-disk `SKILL.md` package format.
//! - [`skill_bank`]: registered skills, the eagerly injected catalog, pruning and merging.
//! - [`context`]: conversation DAG and two-level adaptive compression.
//! - [`memory`]: the `## <timestamp> UTC` block format shared by every memory tier.
//! - [`session`]: per-session workspaces, event streams, snapshots and resume.
//! - [`sandbox`]: the sandbox lifecycle tools and the local-process backend.
//! - [`agent`]: the agent loop, tool registry and model-client contract.
//! - [`lifecycle`]: skill creation, evaluation, refinement and distillation.
//!
//! Every model interaction goes through [`agent::ModelClient`], so the whole
//! runtime can be driven by [`agent::ScriptedModel`] without credentials.

pub mod agent;
pub mod cli;
pub mod clock;
pub mod context;
pub mod home;
pub mod lifecycle;
pub mod memory;
pub mod sandbox;
pub mod session;
pub mod skill_bank;
pub mod skill_package;

mod fsutil;

pub use clock::{Clock, FixedClock, StepClock, SystemClock};
pub use home::AgentHome;
