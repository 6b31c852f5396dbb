//! The do-until loop: pre-scan → work → review, per SAM, until the
//! expectation is verified or a hard limit fires.
//!
//! One run is strictly sequential. Each iteration of a node runs exactly one
//! pre-scan, completes the plan's pending sub-SAMs (each through its own
//! loop), runs one work phase and one review phase, then records a judgment
//! and an iteration-status event on the history tape. A failed iteration
//! writes the review's suggested fixes into task memory before the next
//! pre-scan reads it. A node is only ever marked done by a pass verdict, and
//! a parent can only pass after all of its children have.
//!
//! Limits are evaluated before every iteration against the logical clock
//! (wall time as of the last recorded model call), which keeps the decision
//! sequence reproducible in replay; the drift against real time is bounded
//! by one work slice. The task file is re-hashed before every review so an
//! agent that edits its own stop criterion aborts the run instead of passing
//! it.

pub mod prompts;

mod phases;
mod replay_tools;
mod replayer;
mod state;

pub use replay_tools::ReplayToolRunner;
pub use replayer::{replay_task, ReplayOutcome};
pub use state::RunState;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audit::{AuditError, ReplayError};
use crate::clock::{RunClock, TimestampMs};
use crate::gateway::types::{CallContext, CompletionRequest, RoleClass};
use crate::gateway::{Gateway, GatewayCompletion, GatewayError};
use crate::memory::{
    finalize, EventKind, FinalizeError, MemoryError, MemoryScope, MemoryStore, NewHistoryEvent,
    Section,
};
use crate::sam::{assert_unmodified, NodeId, NodeStatus, SamDocument, UnknownNode};
use crate::sandbox::ToolRunner;
use crate::skills::Skill;
use crate::store::{Phase, RunId, StorePaths};

/// Floor for the derived per-iteration work slice.
pub const MIN_WORK_SLICE: Duration = Duration::from_secs(30);

/// Conversation-round caps keep a confused model from looping forever
/// inside one phase.
pub const MAX_WORK_ROUNDS: u32 = 16;
pub const MAX_REVIEW_ROUNDS: u32 = 8;
/// Malformed tool calls tolerated per phase before the claim is given up.
pub const MAX_PROTOCOL_ERRORS: u32 = 2;
/// Pre-scan retries before falling back to the deterministic document-order
/// plan.
pub const MAX_PLAN_RETRIES: u32 = 2;

/// One iteration's plan from the pre-scan agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub target_node: NodeId,
    /// Pending children of the target, in execution order.
    pub subtask_order: Vec<NodeId>,
    /// `(before, after)` pairs the order must honor.
    pub dependencies: Vec<(NodeId, NodeId)>,
    pub work_rank: u32,
    pub carried_context: String,
}

impl Plan {
    /// Truncated SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        short_digest(&serde_json::to_string(self).expect("plan serializes"))
    }
}

pub(crate) fn short_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClaimStatus {
    #[serde(rename = "completed")]
    Completed,
    #[serde(rename = "not-completed")]
    NotCompleted,
}

/// One executed tool call and a digest of its result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolTraceEntry {
    pub call: String,
    pub result_digest: String,
}

/// What the work agent claimed at the end of its turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkClaim {
    pub node_id: NodeId,
    pub claim: ClaimStatus,
    pub narrative: String,
    pub tool_trace: Vec<ToolTraceEntry>,
    /// Work slice expired during the phase.
    pub timed_out: bool,
    /// Model that served the first work round.
    pub work_model: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictOutcome {
    #[serde(rename = "pass")]
    Pass,
    #[serde(rename = "fail")]
    Fail,
    #[serde(rename = "timeout")]
    Timeout,
    #[serde(rename = "limit-exceeded")]
    LimitExceeded,
}

impl VerdictOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            VerdictOutcome::Pass => "pass",
            VerdictOutcome::Fail => "fail",
            VerdictOutcome::Timeout => "timeout",
            VerdictOutcome::LimitExceeded => "limit-exceeded",
        }
    }
}

/// Review outcome for one iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub outcome: VerdictOutcome,
    pub reason: String,
    pub suggested_fixes: String,
    /// Review-demanded work-rank revision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_request: Option<u32>,
}

/// One pass of the loop, as recorded on the history tape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based, consecutive per node.
    pub index: u32,
    pub node_id: NodeId,
    pub plan_digest: String,
    pub work_model: String,
    pub verdict: Verdict,
    pub started_at: TimestampMs,
    pub ended_at: TimestampMs,
    pub tokens: u64,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LimitKind {
    #[serde(rename = "iterations")]
    Iterations,
    #[serde(rename = "wall-time")]
    WallTime,
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunOutcome {
    Pass,
    LimitExceeded(LimitKind),
    GatewayExhausted,
    TamperDetected(String),
    SandboxFailure(String),
}

impl RunOutcome {
    pub fn summary(&self) -> String {
        match self {
            RunOutcome::Pass => "pass".to_string(),
            RunOutcome::LimitExceeded(LimitKind::Iterations) => {
                "limit-exceeded: iterations".to_string()
            }
            RunOutcome::LimitExceeded(LimitKind::WallTime) => {
                "limit-exceeded: wall-time".to_string()
            }
            RunOutcome::GatewayExhausted => "gateway-exhausted".to_string(),
            RunOutcome::TamperDetected(msg) => format!("tamper-detected: {msg}"),
            RunOutcome::SandboxFailure(msg) => format!("sandbox-failure: {msg}"),
        }
    }
}

/// Result of one `run` invocation.
#[derive(Debug, Clone)]
pub struct TaskRunResult {
    pub outcome: RunOutcome,
    /// Iterations executed by this invocation (a resumed run reports only
    /// its own).
    pub iterations: Vec<IterationRecord>,
    /// Last verdict line per node, cumulative across resumes.
    pub node_verdicts: BTreeMap<NodeId, String>,
    /// Cumulative across resumes.
    pub total_iterations: u32,
    pub wall_time: Duration,
}

/// Everything a run needs beyond the document itself. Metadata overrides
/// (limits, skills, preference) are resolved by the caller before this is
/// built.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub run_id: RunId,
    pub task_folder: PathBuf,
    pub max_iterations: u32,
    pub wall_time_limit: Duration,
    /// Explicit per-iteration work slice; `None` derives
    /// `max(wall_time_limit / max_iterations, 30s)`.
    pub work_slice_override: Option<Duration>,
    pub store: StorePaths,
    pub skills: Vec<Skill>,
    pub model_preference: Option<String>,
    pub initial_work_rank: u32,
}

impl RunConfig {
    /// Resolve a config from parsed task metadata: limits, preference, and
    /// the difficulty hint (which seeds the initial work rank) come from the
    /// task file; skills are the already-selected bodies.
    pub fn from_metadata(
        run_id: RunId,
        task_folder: PathBuf,
        metadata: &crate::sam::TaskMetadata,
        store: StorePaths,
        skills: Vec<Skill>,
    ) -> RunConfig {
        RunConfig {
            run_id,
            task_folder,
            max_iterations: metadata.max_iterations,
            wall_time_limit: Duration::from_secs(metadata.wall_time_limit_secs),
            work_slice_override: None,
            store,
            skills,
            model_preference: metadata.model_preference.clone(),
            initial_work_rank: metadata.difficulty_hint.unwrap_or(1),
        }
    }

    pub fn work_slice(&self) -> Duration {
        if let Some(slice) = self.work_slice_override {
            return slice;
        }
        let derived = self.wall_time_limit / self.max_iterations.max(1);
        derived.max(MIN_WORK_SLICE)
    }
}

/// Fatal engine failures: store corruption, audit failures, replay
/// divergence. Orderly endings (limits, exhaustion, tamper) are outcomes,
/// not errors.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("run state io: {0}")]
    State(std::io::Error),
    #[error("gateway failure: {0}")]
    Gateway(String),
    #[error(transparent)]
    Node(#[from] UnknownNode),
}

/// Internal control flow: why the loop must stop here.
pub(crate) enum Stop {
    Limit(LimitKind),
    GatewayExhausted,
    Tamper(String),
    Sandbox(String),
    Fatal(EngineError),
}

impl From<EngineError> for Stop {
    fn from(e: EngineError) -> Self {
        Stop::Fatal(e)
    }
}

impl From<MemoryError> for Stop {
    fn from(e: MemoryError) -> Self {
        Stop::Fatal(EngineError::Memory(e))
    }
}

pub struct Engine {
    pub(crate) doc: SamDocument,
    pub(crate) config: RunConfig,
    pub(crate) gateway: Arc<Gateway>,
    pub(crate) tools: Box<dyn ToolRunner>,
    pub(crate) store: MemoryStore,
    pub(crate) clock: Arc<RunClock>,
    pub(crate) state: RunState,
    iterations: Vec<IterationRecord>,
    /// Logical time when this invocation started; the wall limit is checked
    /// against it.
    invocation_started: TimestampMs,
    /// Per-iteration call tallies.
    pub(crate) iter_tokens: u64,
    pub(crate) iter_cost: f64,
}

impl Engine {
    /// Build an engine over an already-resolved sandbox. Resource resolution
    /// happens strictly before this point (the tool runner exists), so no
    /// model call can ever precede it. Resumes from the state file when one
    /// exists.
    pub fn new(
        doc: SamDocument,
        config: RunConfig,
        gateway: Arc<Gateway>,
        tools: Box<dyn ToolRunner>,
    ) -> Result<Engine, EngineError> {
        let store = MemoryStore::new(config.store.clone());
        let state_path = config.store.state_file(&config.run_id);
        let state = RunState::load(&state_path)
            .map_err(EngineError::State)?
            .unwrap_or_else(|| RunState::new(config.run_id.clone(), config.initial_work_rank));
        gateway.restore_rank_override(&config.run_id, state.work_rank);
        let clock = gateway.clock();
        let invocation_started = clock.now_ms();
        gateway
            .begin_invocation(
                &config.run_id,
                crate::audit::InvocationMarker {
                    created_at: invocation_started,
                    max_iterations: config.max_iterations,
                    wall_time_limit_ms: config.wall_time_limit.as_millis() as u64,
                    work_slice_ms: config.work_slice().as_millis() as u64,
                },
            )
            .map_err(|e| match e {
                GatewayError::Audit(audit) => EngineError::Audit(audit),
                other => EngineError::Gateway(other.to_string()),
            })?;
        Ok(Engine {
            doc,
            config,
            gateway,
            tools,
            store,
            clock,
            state,
            iterations: Vec::new(),
            invocation_started,
            iter_tokens: 0,
            iter_cost: 0.0,
        })
    }

    /// Run the task to an outcome. The final task review (memory
    /// distillation) runs for every orderly ending; tamper and sandbox
    /// aborts skip it.
    pub fn run(mut self) -> Result<TaskRunResult, EngineError> {
        let root = self.doc.root.id.clone();
        let outcome = match self.complete_node(&root) {
            Ok(()) => RunOutcome::Pass,
            Err(Stop::Limit(kind)) => RunOutcome::LimitExceeded(kind),
            Err(Stop::GatewayExhausted) => RunOutcome::GatewayExhausted,
            Err(Stop::Tamper(msg)) => RunOutcome::TamperDetected(msg),
            Err(Stop::Sandbox(msg)) => RunOutcome::SandboxFailure(msg),
            Err(Stop::Fatal(e)) => return Err(e),
        };

        if !matches!(
            outcome,
            RunOutcome::TamperDetected(_) | RunOutcome::SandboxFailure(_)
        ) {
            match finalize(
                &self.store,
                &self.gateway,
                &self.config.run_id,
                &outcome.summary(),
            ) {
                Ok(_) => {}
                Err(FinalizeError::Memory(e)) => return Err(e.into()),
                Err(FinalizeError::Gateway(e)) => return Err(EngineError::Gateway(e.to_string())),
            }
        }

        Ok(TaskRunResult {
            outcome,
            iterations: std::mem::take(&mut self.iterations),
            node_verdicts: self.state.last_verdicts.clone(),
            total_iterations: self.state.total_iterations,
            wall_time: self.clock.elapsed(),
        })
    }

    /// Loop one node (and, through its plans, its descendants) to done.
    fn complete_node(&mut self, node_id: &NodeId) -> Result<(), Stop> {
        while self.state.status(node_id) != NodeStatus::Done {
            if let Some(stop) = self.check_limits() {
                return Err(stop);
            }
            self.run_sam_iteration(node_id)?;
        }
        Ok(())
    }

    /// Hard-limit gate, evaluated before every iteration.
    pub(crate) fn check_limits(&self) -> Option<Stop> {
        if self.state.total_iterations >= self.config.max_iterations {
            return Some(Stop::Limit(LimitKind::Iterations));
        }
        let elapsed_ms = self.clock.now_ms().saturating_sub(self.invocation_started);
        if elapsed_ms as u128 >= self.config.wall_time_limit.as_millis() {
            return Some(Stop::Limit(LimitKind::WallTime));
        }
        if !self.gateway.has_any_enabled() {
            return Some(Stop::GatewayExhausted);
        }
        None
    }

    /// Exactly one pre-scan, one work phase, one review phase, in order,
    /// plus their store effects.
    fn run_sam_iteration(&mut self, node_id: &NodeId) -> Result<IterationRecord, Stop> {
        let iteration = self.state.iteration_count(node_id) + 1;
        self.state.set_status(node_id, NodeStatus::InProgress);
        self.save_state()?;
        self.iter_tokens = 0;
        self.iter_cost = 0.0;
        let started_at = self.clock.now_ms();

        let plan = self.pre_scan(node_id, iteration)?;
        if plan.work_rank != self.state.work_rank {
            self.apply_rank_revision(Phase::PreScan, node_id, iteration, plan.work_rank)?;
        }

        for child in plan.subtask_order.clone() {
            if self.state.status(&child) != NodeStatus::Done {
                self.complete_node(&child)?;
            }
        }

        let claim = self.work_phase(node_id, &plan, iteration)?;

        // The expectation must still be exactly what the user wrote.
        if let Err(e) = assert_unmodified(&self.doc) {
            return Err(Stop::Tamper(e.to_string()));
        }

        let verdict = if claim.timed_out {
            Verdict {
                outcome: VerdictOutcome::Timeout,
                reason: "work phase exceeded its time slice".to_string(),
                suggested_fixes: "break the work into smaller steps and redo the unfinished part"
                    .to_string(),
                rank_request: None,
            }
        } else {
            self.review_phase(node_id, &claim, iteration)?
        };
        let verdict = normalize_verdict(&claim, verdict);

        if let Some(rank) = verdict.rank_request {
            if rank != self.state.work_rank {
                self.apply_rank_revision(Phase::Review, node_id, iteration, rank)?;
            }
        }

        match verdict.outcome {
            VerdictOutcome::Pass => {
                self.state.set_status(node_id, NodeStatus::Done);
            }
            _ => {
                let fixes = if verdict.suggested_fixes.trim().is_empty() {
                    verdict.reason.clone()
                } else {
                    verdict.suggested_fixes.clone()
                };
                let pattern = format!(
                    "iteration {iteration} {}: {}\nsuggested fixes: {fixes}",
                    verdict.outcome.as_str(),
                    verdict.reason
                );
                let scope = MemoryScope::Task(self.config.run_id.clone());
                let now = self.clock.now_ms();
                self.store
                    .update_memory(&scope, Section::FailurePatterns, &pattern, Phase::Review, now)?;
                self.store
                    .update_memory(&scope, Section::Suggestions, &fixes, Phase::Review, now)?;
            }
        }

        self.append_event(
            node_id,
            iteration,
            EventKind::Judgment,
            &format!("{}: {}", verdict.outcome.as_str(), verdict.reason),
        )?;

        let ended_at = self.clock.now_ms();
        let record = IterationRecord {
            index: iteration,
            node_id: node_id.clone(),
            plan_digest: plan.digest(),
            work_model: claim.work_model.clone(),
            verdict: verdict.clone(),
            started_at,
            ended_at,
            tokens: self.iter_tokens,
            cost: self.iter_cost,
        };
        self.append_event(
            node_id,
            iteration,
            EventKind::IterationStatus,
            &serde_json::to_string(&record).expect("iteration record serializes"),
        )?;

        self.state
            .iteration_counts
            .insert(node_id.clone(), iteration);
        self.state.total_iterations += 1;
        self.state.last_verdicts.insert(
            node_id.clone(),
            format!("{}: {}", verdict.outcome.as_str(), verdict.reason),
        );
        self.save_state()?;
        self.iterations.push(record.clone());
        Ok(record)
    }

    fn apply_rank_revision(
        &mut self,
        caller: Phase,
        node_id: &NodeId,
        iteration: u32,
        new_rank: u32,
    ) -> Result<(), Stop> {
        let old = self.state.work_rank;
        self.gateway
            .revise_rank(&self.config.run_id, caller, new_rank)
            .map_err(|e| Stop::Fatal(EngineError::Gateway(e.to_string())))?;
        self.state.work_rank = new_rank;
        self.append_event(
            node_id,
            iteration,
            EventKind::DirectionChange,
            &format!("work rank revised {old} -> {new_rank} by {caller}"),
        )?;
        self.save_state()?;
        Ok(())
    }

    pub(crate) fn append_event(
        &self,
        node_id: &NodeId,
        iteration: u32,
        kind: EventKind,
        payload: &str,
    ) -> Result<u64, Stop> {
        self.store
            .append_history(NewHistoryEvent {
                run_id: &self.config.run_id,
                iteration,
                node_id,
                kind,
                payload,
                timestamp: self.clock.now_ms(),
            })
            .map_err(Stop::from)
    }

    fn save_state(&self) -> Result<(), Stop> {
        self.state
            .save(&self.config.store.state_file(&self.config.run_id))
            .map_err(|e| Stop::Fatal(EngineError::State(e)))
    }

    /// Issue one gateway call for a phase, tallying usage into the current
    /// iteration and mapping exhaustion to the orderly stop.
    pub(crate) fn call_model(
        &mut self,
        phase: Phase,
        node_id: &NodeId,
        iteration: u32,
        role: RoleClass,
        rank: u32,
        request: &CompletionRequest,
    ) -> Result<GatewayCompletion, Stop> {
        let prefer = if role == RoleClass::Work {
            self.config.model_preference.as_deref()
        } else {
            None
        };
        let ctx = CallContext::for_node(
            self.config.run_id.clone(),
            phase,
            node_id.clone(),
            iteration,
        );
        match self.gateway.complete(&ctx, role, rank, prefer, request) {
            Ok(done) => {
                self.iter_tokens += done.response.usage.map(|u| u.total()).unwrap_or(0);
                self.iter_cost += done.cost;
                Ok(done)
            }
            Err(GatewayError::NoUsableModel { .. } | GatewayError::AllProvidersFailed { .. }) => {
                Err(Stop::GatewayExhausted)
            }
            Err(GatewayError::Audit(e)) => Err(Stop::Fatal(EngineError::Audit(e))),
            Err(GatewayError::Replay(e)) => Err(Stop::Fatal(EngineError::Replay(e))),
            Err(e) => Err(Stop::Fatal(EngineError::Gateway(e.to_string()))),
        }
    }
}

/// Enforce verdict invariants: pass carries no fixes, fail carries a reason,
/// and a completed claim overturned by review is marked as a false positive.
fn normalize_verdict(claim: &WorkClaim, mut verdict: Verdict) -> Verdict {
    match verdict.outcome {
        VerdictOutcome::Pass => verdict.suggested_fixes.clear(),
        VerdictOutcome::Fail => {
            if verdict.reason.trim().is_empty() {
                verdict.reason = "review reported failure without detail".to_string();
            }
            if claim.claim == ClaimStatus::Completed
                && !verdict.reason.starts_with("false-positive:")
            {
                verdict.reason = format!("false-positive: {}", verdict.reason);
            }
        }
        _ => {}
    }
    verdict
}

#[cfg(test)]
mod tests {
    use super::*;

    fn claim(status: ClaimStatus) -> WorkClaim {
        WorkClaim {
            node_id: NodeId::root(),
            claim: status,
            narrative: "n".into(),
            tool_trace: vec![],
            timed_out: false,
            work_model: "m".into(),
        }
    }

    #[test]
    fn pass_clears_fixes() {
        let v = normalize_verdict(
            &claim(ClaimStatus::Completed),
            Verdict {
                outcome: VerdictOutcome::Pass,
                reason: "ok".into(),
                suggested_fixes: "should vanish".into(),
                rank_request: None,
            },
        );
        assert!(v.suggested_fixes.is_empty());
    }

    #[test]
    fn overturned_completion_claim_is_marked_false_positive() {
        let v = normalize_verdict(
            &claim(ClaimStatus::Completed),
            Verdict {
                outcome: VerdictOutcome::Fail,
                reason: "out.txt missing".into(),
                suggested_fixes: "create it".into(),
                rank_request: None,
            },
        );
        assert_eq!(v.reason, "false-positive: out.txt missing");
    }

    #[test]
    fn honest_failure_is_not_marked_false_positive() {
        let v = normalize_verdict(
            &claim(ClaimStatus::NotCompleted),
            Verdict {
                outcome: VerdictOutcome::Fail,
                reason: "not there yet".into(),
                suggested_fixes: String::new(),
                rank_request: None,
            },
        );
        assert_eq!(v.reason, "not there yet");
    }

    #[test]
    fn empty_fail_reason_gets_a_default() {
        let v = normalize_verdict(
            &claim(ClaimStatus::NotCompleted),
            Verdict {
                outcome: VerdictOutcome::Fail,
                reason: "  ".into(),
                suggested_fixes: String::new(),
                rank_request: None,
            },
        );
        assert!(!v.reason.trim().is_empty());
    }

    #[test]
    fn derived_work_slice_has_a_floor() {
        let config = RunConfig {
            run_id: RunId::new("r"),
            task_folder: PathBuf::from("/t"),
            max_iterations: 200,
            wall_time_limit: Duration::from_secs(3600),
            work_slice_override: None,
            store: StorePaths::for_task(std::path::Path::new("/t"), std::path::Path::new("/g")),
            skills: vec![],
            model_preference: None,
            initial_work_rank: 1,
        };
        // 3600/200 = 18s, floored to 30s.
        assert_eq!(config.work_slice(), Duration::from_secs(30));
        let long = RunConfig {
            max_iterations: 10,
            ..config.clone()
        };
        assert_eq!(long.work_slice(), Duration::from_secs(360));
        let fixed = RunConfig {
            work_slice_override: Some(Duration::from_secs(1)),
            ..config
        };
        assert_eq!(fixed.work_slice(), Duration::from_secs(1));
    }
}
