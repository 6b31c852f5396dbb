//! Re-execute a recorded run from its audit tape.
//!
//! The tape is the single source of truth: responses come from the records
//! (each verified against the regenerated request), tool results come from
//! the recorded conversations, and every invocation of the original
//! lifecycle is re-run under its own recorded limits. Output goes to the
//! sibling replay store; the original stores and the task folder are never
//! written.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use crate::audit::{InvocationMarker, ReplaySource};
use crate::clock::RunClock;
use crate::gateway::Gateway;
use crate::sam::{NodeStatus, SamDocument};
use crate::store::StorePaths;

use super::{
    Engine, EngineError, ReplayToolRunner, RunConfig, RunOutcome, RunState, TaskRunResult,
};

/// What a replay produced.
#[derive(Debug)]
pub struct ReplayOutcome {
    pub result: TaskRunResult,
    /// Where the replayed stores were written.
    pub replay_store: StorePaths,
    /// True when the replayed history tape is byte-identical to the
    /// original.
    pub history_matches: bool,
    pub records_total: u64,
}

/// Replay `base_config.run_id` from its audit file. The document must be
/// parsed from the task file as it exists now; a digest mismatch against the
/// recorded header refuses to replay before any request comparison.
pub fn replay_task(
    doc: &SamDocument,
    base_config: &RunConfig,
    audit_path: &Path,
) -> Result<ReplayOutcome, EngineError> {
    let source = Arc::new(ReplaySource::open(audit_path)?);
    let header = source.header().clone();
    let replay_store = base_config.store.replay_variant(&base_config.run_id);

    if header.source_digest != doc.source_digest {
        return Ok(ReplayOutcome {
            result: TaskRunResult {
                outcome: RunOutcome::TamperDetected(format!(
                    "task file digest {} differs from the recorded {}",
                    doc.source_digest, header.source_digest
                )),
                iterations: Vec::new(),
                node_verdicts: Default::default(),
                total_iterations: 0,
                wall_time: Duration::ZERO,
            },
            replay_store,
            history_matches: false,
            records_total: source.record_count(),
        });
    }

    // A stale partial replay would resume mid-tape; start clean.
    if replay_store.task_root().exists() {
        std::fs::remove_dir_all(replay_store.task_root()).map_err(EngineError::State)?;
    }

    let clock = RunClock::seeded(header.created_at);
    let gateway = Arc::new(Gateway::replay(clock, Arc::clone(&source)));

    let total = source.record_count() as usize;
    let mut windows = source.invocation_windows();
    if windows.is_empty() {
        // Tape written before invocation markers existed: replay as one
        // invocation under the caller's limits.
        windows.push((
            InvocationMarker {
                created_at: header.created_at,
                max_iterations: base_config.max_iterations,
                wall_time_limit_ms: base_config.wall_time_limit.as_millis() as u64,
                work_slice_ms: base_config.work_slice().as_millis() as u64,
            },
            0,
            total,
        ));
    }

    let mut last: Option<TaskRunResult> = None;
    for (marker, _start, end) in windows {
        // Nothing left to do once a pass completed the root.
        if let Some(state) = RunState::load(&replay_store.state_file(&base_config.run_id))
            .map_err(EngineError::State)?
        {
            if state.status(&doc.root.id) == NodeStatus::Done {
                break;
            }
        }
        source.set_window_end(end);
        gateway.clock().advance_to(marker.created_at);
        let config = RunConfig {
            run_id: base_config.run_id.clone(),
            task_folder: base_config.task_folder.clone(),
            max_iterations: marker.max_iterations,
            wall_time_limit: Duration::from_millis(marker.wall_time_limit_ms),
            work_slice_override: Some(Duration::from_millis(marker.work_slice_ms)),
            store: replay_store.clone(),
            skills: base_config.skills.clone(),
            model_preference: base_config.model_preference.clone(),
            initial_work_rank: base_config.initial_work_rank,
        };
        let tools = Box::new(ReplayToolRunner::new(Arc::clone(&source)));
        let engine = Engine::new(doc.clone(), config, Arc::clone(&gateway), tools)?;
        match engine.run() {
            Ok(result) => last = Some(result),
            // The original process was killed at this tape position; the
            // replayed invocation abandons its in-flight iteration the same
            // way (no finalize, no events) and the next invocation resumes.
            Err(EngineError::Replay(crate::audit::ReplayError::InvocationEnded { .. })) => {}
            Err(e) => return Err(e),
        }
    }
    let Some(result) = last else {
        // Every invocation was cut short; report the interruption honestly.
        return Err(EngineError::Replay(
            crate::audit::ReplayError::InvocationEnded {
                consumed: source.record_count(),
            },
        ));
    };

    let original_history =
        std::fs::read(base_config.store.history_file(&base_config.run_id)).unwrap_or_default();
    let replayed_history =
        std::fs::read(replay_store.history_file(&base_config.run_id)).unwrap_or_default();

    Ok(ReplayOutcome {
        result,
        replay_store,
        history_matches: !original_history.is_empty() && original_history == replayed_history,
        records_total: source.record_count(),
    })
}
