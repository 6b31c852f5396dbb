//! Core library for the `scifi` closed-loop task orchestrator.
//!
//! A task is written as a tree of Self-Assessed Modules (SAMs): each module
//! carries an optional context, a mandatory to-do, and a mandatory
//! expectation that serves as its verifiable stop criterion. The engine runs
//! every SAM through a pre-scan → work → review loop until the expectation is
//! verified or a hard limit fires, with all model traffic routed through a
//! rank-aware gateway that records every call for exact replay.
//!
//! Module map:
//! - [`sam`]: deterministic task-file parsing, validation, rendering, and
//!   integrity checks.
//! - [`engine`]: the do-until loop of planning, work execution, and review.
//! - [`memory`]: scoped memory files and the append-only history tape.
//! - [`audit`]: verbatim model-call log, replay, and export.
//! - [`gateway`]: model registry, rank routing, budgets, scripted backend.
//! - [`sandbox`]: default-deny resource resolution and tool execution.
//! - [`skills`]: reusable context blocks injected into work prompts.

pub mod audit;
pub mod clock;
pub mod engine;
pub mod gateway;
pub mod lock;
pub mod memory;
pub mod sam;
pub mod sandbox;
pub mod skills;
pub mod store;

pub use clock::RunClock;
pub use store::StorePaths;
