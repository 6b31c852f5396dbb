//! Shared run vocabulary and the on-disk store layout.
//!
//! Everything a run persists lives under two roots:
//!
//! ```text
//! <task>/.scifi/
//!   memory/task-<runid>.md     task-level memory (one file per run)
//!   memory/group.md            task-group memory (shared across runs)
//!   history/<runid>.log        append-only history tape (JSON lines)
//!   audit/<runid>.log          model-call audit log (JSON lines)
//!   state/<runid>.json         resumable run state
//!   replay/<runid>/...         same layout, written by replay only
//! <store-root>/
//!   global.md                  global memory (shared across tasks)
//!   audit/<runid>.log          audit for UI tools that run outside a task
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Identifier of one task run. Caller-chosen; must be filesystem-safe.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RunId(pub String);

impl RunId {
    pub fn new(id: impl Into<String>) -> Self {
        RunId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RunId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Which agent (or tool) originated an action. Tags memory writes, gateway
/// calls, and audit records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "pre-scan")]
    PreScan,
    #[serde(rename = "work")]
    Work,
    #[serde(rename = "review")]
    Review,
    #[serde(rename = "final-review")]
    FinalReview,
    #[serde(rename = "ui-tool")]
    UiTool,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::PreScan => "pre-scan",
            Phase::Work => "work",
            Phase::Review => "review",
            Phase::FinalReview => "final-review",
            Phase::UiTool => "ui-tool",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Resolved locations of the per-task and global store roots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StorePaths {
    task_root: PathBuf,
    global_root: PathBuf,
}

impl StorePaths {
    /// Stores for a task folder: `<task>/.scifi` plus a global root.
    pub fn for_task(task_folder: &Path, global_root: &Path) -> Self {
        StorePaths {
            task_root: task_folder.join(".scifi"),
            global_root: global_root.to_path_buf(),
        }
    }

    /// Stores rooted directly at the given paths (used by replay and tests).
    pub fn at(task_root: PathBuf, global_root: PathBuf) -> Self {
        StorePaths {
            task_root,
            global_root,
        }
    }

    /// The sibling store a replay of `run` writes into. Keeps the replayed
    /// run's output separate from the recorded one so replay stays read-only
    /// with respect to the original stores.
    pub fn replay_variant(&self, run: &RunId) -> Self {
        let root = self.task_root.join("replay").join(run.as_str());
        StorePaths {
            global_root: root.join("global"),
            task_root: root,
        }
    }

    pub fn task_root(&self) -> &Path {
        &self.task_root
    }

    pub fn global_root(&self) -> &Path {
        &self.global_root
    }

    pub fn task_memory_file(&self, run: &RunId) -> PathBuf {
        self.task_root.join("memory").join(format!("task-{run}.md"))
    }

    pub fn group_memory_file(&self) -> PathBuf {
        self.task_root.join("memory").join("group.md")
    }

    pub fn global_memory_file(&self) -> PathBuf {
        self.global_root.join("global.md")
    }

    pub fn history_file(&self, run: &RunId) -> PathBuf {
        self.task_root.join("history").join(format!("{run}.log"))
    }

    pub fn audit_file(&self, run: &RunId) -> PathBuf {
        self.task_root.join("audit").join(format!("{run}.log"))
    }

    pub fn state_file(&self, run: &RunId) -> PathBuf {
        self.task_root.join("state").join(format!("{run}.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_documented_paths() {
        let paths = StorePaths::for_task(Path::new("/work/task"), Path::new("/home/u/.scifi"));
        let run = RunId::new("r1");
        assert_eq!(
            paths.task_memory_file(&run),
            Path::new("/work/task/.scifi/memory/task-r1.md")
        );
        assert_eq!(
            paths.group_memory_file(),
            Path::new("/work/task/.scifi/memory/group.md")
        );
        assert_eq!(
            paths.global_memory_file(),
            Path::new("/home/u/.scifi/global.md")
        );
        assert_eq!(
            paths.history_file(&run),
            Path::new("/work/task/.scifi/history/r1.log")
        );
        assert_eq!(
            paths.audit_file(&run),
            Path::new("/work/task/.scifi/audit/r1.log")
        );
    }

    #[test]
    fn replay_variant_is_disjoint_from_original() {
        let paths = StorePaths::for_task(Path::new("/t"), Path::new("/g"));
        let run = RunId::new("r7");
        let replay = paths.replay_variant(&run);
        assert_ne!(replay.history_file(&run), paths.history_file(&run));
        assert!(replay
            .history_file(&run)
            .starts_with("/t/.scifi/replay/r7"));
    }
}
