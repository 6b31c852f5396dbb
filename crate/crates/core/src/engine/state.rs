//! Resumable run state.
//!
//! Node statuses, per-node iteration counters, and the current work rank
//! persist in `<task>/.scifi/state/<runid>.json` after every iteration, so a
//! killed process can resume at iteration k+1 with nothing but the stores.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::sam::{NodeId, NodeStatus};
use crate::store::RunId;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: RunId,
    pub statuses: BTreeMap<NodeId, NodeStatus>,
    pub iteration_counts: BTreeMap<NodeId, u32>,
    pub total_iterations: u32,
    pub work_rank: u32,
    /// Last verdict line per node, for run summaries.
    pub last_verdicts: BTreeMap<NodeId, String>,
}

impl RunState {
    pub fn new(run_id: RunId, initial_rank: u32) -> Self {
        RunState {
            run_id,
            statuses: BTreeMap::new(),
            iteration_counts: BTreeMap::new(),
            total_iterations: 0,
            work_rank: initial_rank,
            last_verdicts: BTreeMap::new(),
        }
    }

    pub fn status(&self, node: &NodeId) -> NodeStatus {
        self.statuses.get(node).copied().unwrap_or_default()
    }

    pub fn set_status(&mut self, node: &NodeId, status: NodeStatus) {
        self.statuses.insert(node.clone(), status);
    }

    pub fn iteration_count(&self, node: &NodeId) -> u32 {
        self.iteration_counts.get(node).copied().unwrap_or(0)
    }

    /// Load the state file if one exists; `None` starts a fresh run.
    pub fn load(path: &Path) -> std::io::Result<Option<RunState>> {
        if !path.exists() {
            return Ok(None);
        }
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw)
            .map(Some)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Persist atomically (write-then-rename).
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("json.tmp");
        {
            let mut handle = std::fs::File::create(&tmp)?;
            handle.write_all(serde_json::to_string_pretty(self).expect("state serializes").as_bytes())?;
            handle.sync_data()?;
        }
        std::fs::rename(&tmp, path)
    }
}
