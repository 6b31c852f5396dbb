//! The three phases of one iteration.

use std::time::Duration;

use serde_json::Value;

use super::prompts;
use super::{
    short_digest, ClaimStatus, Engine, EngineError, Plan, Stop, ToolTraceEntry, Verdict,
    VerdictOutcome, WorkClaim, MAX_PLAN_RETRIES, MAX_PROTOCOL_ERRORS, MAX_REVIEW_ROUNDS,
    MAX_WORK_ROUNDS,
};
use crate::gateway::types::{
    CompletionRequest, Message, RoleClass, SamplingParams, ToolCall,
};
use crate::memory::{EventFilter, EventKind, MemoryScope};
use crate::sam::{extract_expectation, render_for_agent, NodeId, NodeStatus};
use crate::store::Phase;

/// History events shown to the control agents.
const HISTORY_TAIL: usize = 10;

impl Engine {
    /// Pre-scan: read the SAM, the memory, and the recent history; produce
    /// this iteration's plan. Unparseable model output is retried a bounded
    /// number of times, then the deterministic document-order plan applies.
    pub(crate) fn pre_scan(&mut self, node_id: &NodeId, iteration: u32) -> Result<Plan, Stop> {
        let task_scope = MemoryScope::Task(self.config.run_id.clone());
        let task_memory = self.store.read_memory(&task_scope)?;
        let group_memory = self.store.read_memory(&MemoryScope::TaskGroup)?;
        let history = self
            .store
            .read_history(&self.config.run_id, &EventFilter::default())?;
        let tail_start = history.len().saturating_sub(HISTORY_TAIL);
        let history_tail = &history[tail_start..];

        let overlaid = self.doc.with_statuses(&self.state.statuses);
        let rendering = render_for_agent(&overlaid, node_id, true).map_err(EngineError::from)?;
        let pending = self.pending_children(node_id);
        let fallback_context = task_memory
            .iter()
            .rev()
            .find(|e| e.section == crate::memory::Section::Suggestions)
            .map(|e| e.body.clone())
            .unwrap_or_default();

        let mut messages = vec![
            Message::system(prompts::PRE_SCAN_SYSTEM),
            Message::user(prompts::pre_scan_user(
                iteration,
                self.state.work_rank,
                &rendering,
                &task_memory,
                &group_memory,
                history_tail,
            )),
        ];

        let control_rank = self.gateway.control_rank();
        for _attempt in 0..=MAX_PLAN_RETRIES {
            let request = CompletionRequest {
                role_class: RoleClass::Control,
                messages: messages.clone(),
                tools: vec![],
                params: SamplingParams::default(),
            };
            let done = self.call_model(
                Phase::PreScan,
                node_id,
                iteration,
                RoleClass::Control,
                control_rank,
                &request,
            )?;
            let content = done.response.message.content.clone();
            match parse_plan(
                &content,
                node_id,
                &pending,
                self.state.work_rank,
                &fallback_context,
            ) {
                Ok(plan) => return Ok(plan),
                Err(problem) => {
                    messages.push(done.response.message.clone());
                    messages.push(Message::user(format!(
                        "That plan was rejected: {problem}. Answer with only the corrected JSON object."
                    )));
                }
            }
        }

        // Deterministic fallback: document order, current rank.
        Ok(Plan {
            target_node: node_id.clone(),
            subtask_order: pending,
            dependencies: Vec::new(),
            work_rank: self.state.work_rank,
            carried_context: fallback_context,
        })
    }

    /// Pending direct children of a node, in document order.
    fn pending_children(&self, node_id: &NodeId) -> Vec<NodeId> {
        self.doc
            .node(node_id)
            .map(|n| {
                n.children
                    .iter()
                    .filter(|c| self.state.status(&c.id) != NodeStatus::Done)
                    .map(|c| c.id.clone())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Work: run the agent conversation, executing shell tools in the
    /// sandbox without confirmation, until the model claims completion, the
    /// slice expires, or a cap fires. The work phase never judges truth;
    /// that is review's job.
    pub(crate) fn work_phase(
        &mut self,
        node_id: &NodeId,
        plan: &Plan,
        iteration: u32,
    ) -> Result<WorkClaim, Stop> {
        let slice_ms = self.config.work_slice().as_millis() as u64;
        let mut spent_ms = 0u64;
        let overlaid = self.doc.with_statuses(&self.state.statuses);
        let rendering = render_for_agent(&overlaid, node_id, false).map_err(EngineError::from)?;

        let mut messages = vec![
            Message::system(prompts::work_system(&self.config.skills)),
            Message::user(prompts::work_user(iteration, &rendering, &plan.carried_context)),
        ];
        let tools = vec![prompts::shell_tool(), prompts::task_complete_tool()];
        let mut trace: Vec<ToolTraceEntry> = Vec::new();
        let mut protocol_errors = 0u32;
        let mut work_model = String::new();

        let claim = |status: ClaimStatus, narrative: String, trace: Vec<ToolTraceEntry>, timed_out: bool, model: &str| {
            WorkClaim {
                node_id: node_id.clone(),
                claim: status,
                narrative,
                tool_trace: trace,
                timed_out,
                work_model: model.to_string(),
            }
        };

        for round in 1..=MAX_WORK_ROUNDS {
            let request = CompletionRequest {
                role_class: RoleClass::Work,
                messages: messages.clone(),
                tools: tools.clone(),
                params: SamplingParams::default(),
            };
            let done = self.call_model(
                Phase::Work,
                node_id,
                iteration,
                RoleClass::Work,
                plan.work_rank,
                &request,
            )?;
            if work_model.is_empty() {
                work_model = done.model.clone();
            }
            let msg = done.response.message.clone();
            messages.push(msg.clone());

            if msg.tool_calls.is_empty() {
                // A plain final message is a completion claim; review will
                // judge whether it is true.
                return Ok(claim(ClaimStatus::Completed, msg.content, trace, false, &work_model));
            }
            // A claim ends the turn outright. Other calls bundled into the
            // same response are not executed: their results could never be
            // delivered to the model, and untracked side effects would make
            // the run unreproducible.
            if let Some(call) = msg.tool_calls.iter().find(|c| c.name == "task_complete") {
                let completed = call
                    .arguments
                    .get("completed")
                    .and_then(Value::as_bool)
                    .unwrap_or(false);
                let summary = call
                    .arguments
                    .get("summary")
                    .and_then(Value::as_str)
                    .unwrap_or("")
                    .to_string();
                let status = if completed {
                    ClaimStatus::Completed
                } else {
                    ClaimStatus::NotCompleted
                };
                return Ok(claim(status, summary, trace, false, &work_model));
            }
            if round == MAX_WORK_ROUNDS {
                // Do not start tools whose results can never be delivered.
                return Ok(claim(
                    ClaimStatus::NotCompleted,
                    "work round limit reached".to_string(),
                    trace,
                    false,
                    &work_model,
                ));
            }

            for call in &msg.tool_calls {
                match call.name.as_str() {
                    "shell" => {
                        let Some(command) =
                            call.arguments.get("command").and_then(Value::as_str)
                        else {
                            protocol_errors += 1;
                            messages.push(Message::tool_result(
                                call.id.clone(),
                                "error: shell requires a string `command` argument",
                            ));
                            if protocol_errors > MAX_PROTOCOL_ERRORS {
                                return Ok(claim(
                                    ClaimStatus::NotCompleted,
                                    "tool protocol failure: malformed shell call".to_string(),
                                    trace,
                                    false,
                                    &work_model,
                                ));
                            }
                            continue;
                        };
                        if spent_ms >= slice_ms {
                            return Ok(claim(
                                ClaimStatus::NotCompleted,
                                "work slice expired".to_string(),
                                trace,
                                true,
                                &work_model,
                            ));
                        }
                        let budget = Duration::from_millis(slice_ms - spent_ms);
                        let outcome = self
                            .tools
                            .run_shell(&call.id, command, budget)
                            .map_err(|e| Stop::Sandbox(e.to_string()))?;
                        spent_ms += outcome.duration_ms;
                        trace.push(ToolTraceEntry {
                            call: format!("shell: {command}"),
                            result_digest: short_digest(&outcome.content),
                        });
                        messages.push(Message::tool_result(call.id.clone(), outcome.content));
                    }
                    other => {
                        protocol_errors += 1;
                        messages.push(Message::tool_result(
                            call.id.clone(),
                            format!("error: unknown tool {other:?}; available: shell, task_complete"),
                        ));
                        if protocol_errors > MAX_PROTOCOL_ERRORS {
                            return Ok(claim(
                                ClaimStatus::NotCompleted,
                                format!("tool protocol failure: unknown tool {other:?}"),
                                trace,
                                false,
                                &work_model,
                            ));
                        }
                    }
                }
            }
            if spent_ms >= slice_ms {
                return Ok(claim(
                    ClaimStatus::NotCompleted,
                    "work slice expired".to_string(),
                    trace,
                    true,
                    &work_model,
                ));
            }
        }
        unreachable!("work loop returns inside the round loop");
    }

    /// Review: verify the expectation (taken only from the parsed document)
    /// against reality. May run read-only verification commands; consults
    /// the judgment history once the node has failed before.
    pub(crate) fn review_phase(
        &mut self,
        node_id: &NodeId,
        claim: &WorkClaim,
        iteration: u32,
    ) -> Result<Verdict, Stop> {
        let expectation =
            extract_expectation(&self.doc, node_id).map_err(EngineError::from)?.to_string();
        let trace_text = if claim.tool_trace.is_empty() {
            "(none)".to_string()
        } else {
            claim
                .tool_trace
                .iter()
                .map(|t| format!("{} => {}", t.call, t.result_digest))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let judgments = self.store.read_history(
            &self.config.run_id,
            &EventFilter {
                kind: Some(EventKind::Judgment),
                node: Some(node_id.clone()),
            },
        )?;
        let tail_start = judgments.len().saturating_sub(HISTORY_TAIL);
        let history_tail = &judgments[tail_start..];

        let claim_label = match claim.claim {
            ClaimStatus::Completed => "completed",
            ClaimStatus::NotCompleted => "not-completed",
        };
        let mut messages = vec![
            Message::system(prompts::REVIEW_SYSTEM),
            Message::user(prompts::review_user(
                iteration,
                &expectation,
                claim_label,
                &claim.narrative,
                &trace_text,
                history_tail,
            )),
        ];
        let tools = vec![prompts::shell_tool(), prompts::verdict_tool()];
        let slice_ms = self.config.work_slice().as_millis() as u64;
        let mut spent_ms = 0u64;
        let mut protocol_errors = 0u32;
        let mut nudged = false;
        let control_rank = self.gateway.control_rank();

        let fail = |reason: &str| Verdict {
            outcome: VerdictOutcome::Fail,
            reason: reason.to_string(),
            suggested_fixes: String::new(),
            rank_request: None,
        };

        for round in 1..=MAX_REVIEW_ROUNDS {
            let request = CompletionRequest {
                role_class: RoleClass::Control,
                messages: messages.clone(),
                tools: tools.clone(),
                params: SamplingParams::default(),
            };
            let done = self.call_model(
                Phase::Review,
                node_id,
                iteration,
                RoleClass::Control,
                control_rank,
                &request,
            )?;
            let msg = done.response.message.clone();
            messages.push(msg.clone());

            if msg.tool_calls.is_empty() {
                if nudged {
                    return Ok(fail("review produced no verdict"));
                }
                nudged = true;
                messages.push(Message::user(
                    "Answer by calling the verdict tool with your conclusion.",
                ));
                continue;
            }
            // A verdict ends the phase; bundled tool calls are not executed
            // (same reproducibility rule as the work phase).
            if let Some(call) = msg.tool_calls.iter().find(|c| c.name == "verdict") {
                return Ok(parse_verdict(call));
            }
            if round == MAX_REVIEW_ROUNDS {
                return Ok(fail("review round limit reached without a verdict"));
            }

            for call in &msg.tool_calls {
                match call.name.as_str() {
                    "shell" => {
                        let Some(command) =
                            call.arguments.get("command").and_then(Value::as_str)
                        else {
                            protocol_errors += 1;
                            messages.push(Message::tool_result(
                                call.id.clone(),
                                "error: shell requires a string `command` argument",
                            ));
                            if protocol_errors > MAX_PROTOCOL_ERRORS {
                                return Ok(fail("review tool protocol failure"));
                            }
                            continue;
                        };
                        if spent_ms >= slice_ms {
                            return Ok(Verdict {
                                outcome: VerdictOutcome::Timeout,
                                reason: "review exceeded its time slice".to_string(),
                                suggested_fixes: String::new(),
                                rank_request: None,
                            });
                        }
                        let budget = Duration::from_millis(slice_ms - spent_ms);
                        let outcome = self
                            .tools
                            .run_shell(&call.id, command, budget)
                            .map_err(|e| Stop::Sandbox(e.to_string()))?;
                        spent_ms += outcome.duration_ms;
                        messages.push(Message::tool_result(call.id.clone(), outcome.content));
                    }
                    other => {
                        protocol_errors += 1;
                        messages.push(Message::tool_result(
                            call.id.clone(),
                            format!("error: unknown tool {other:?}; available: shell, verdict"),
                        ));
                        if protocol_errors > MAX_PROTOCOL_ERRORS {
                            return Ok(fail("review tool protocol failure"));
                        }
                    }
                }
            }
            if spent_ms >= slice_ms {
                return Ok(Verdict {
                    outcome: VerdictOutcome::Timeout,
                    reason: "review exceeded its time slice".to_string(),
                    suggested_fixes: String::new(),
                    rank_request: None,
                });
            }
        }
        Ok(fail("review round limit reached without a verdict"))
    }
}

fn parse_verdict(call: &ToolCall) -> Verdict {
    let outcome = match call.arguments.get("outcome").and_then(Value::as_str) {
        Some("pass") => VerdictOutcome::Pass,
        Some("fail") => VerdictOutcome::Fail,
        other => {
            return Verdict {
                outcome: VerdictOutcome::Fail,
                reason: format!("review verdict malformed: outcome {other:?}"),
                suggested_fixes: String::new(),
                rank_request: None,
            }
        }
    };
    Verdict {
        outcome,
        reason: call
            .arguments
            .get("reason")
            .and_then(Value::as_str)
            .unwrap_or("")
            .to_string(),
        suggested_fixes: call
            .arguments
            .get("suggested_fixes")
            .and_then(Value::as_str)
            .unwrap_or("")
            .to_string(),
        rank_request: call
            .arguments
            .get("work_rank")
            .and_then(Value::as_u64)
            .and_then(|r| u32::try_from(r).ok())
            .filter(|r| *r >= 1),
    }
}

/// Parse the pre-scan JSON plan and validate it against the pending
/// children. Absent fields take their deterministic defaults.
fn parse_plan(
    content: &str,
    node_id: &NodeId,
    pending: &[NodeId],
    current_rank: u32,
    fallback_context: &str,
) -> Result<Plan, String> {
    let start = content.find('{').ok_or("no JSON object in the reply")?;
    let end = content.rfind('}').ok_or("no closing brace in the reply")?;
    if end < start {
        return Err("no JSON object in the reply".to_string());
    }
    let value: Value =
        serde_json::from_str(&content[start..=end]).map_err(|e| format!("bad JSON: {e}"))?;

    let subtask_order: Vec<NodeId> = match value.get("subtask_order") {
        None | Some(Value::Null) => pending.to_vec(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_str()
                    .map(NodeId::new)
                    .ok_or_else(|| "subtask_order entries must be strings".to_string())
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return Err("subtask_order must be an array".to_string()),
    };
    // Must be a permutation of the pending children.
    let mut expected: Vec<&NodeId> = pending.iter().collect();
    let mut got: Vec<&NodeId> = subtask_order.iter().collect();
    expected.sort();
    got.sort();
    if expected != got {
        return Err(format!(
            "subtask_order is not a permutation of the pending sub-tasks of {node_id}"
        ));
    }

    let dependencies: Vec<(NodeId, NodeId)> = match value.get("dependencies") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                let pair = v.as_array().filter(|p| p.len() == 2).ok_or_else(|| {
                    "dependencies entries must be [before, after] pairs".to_string()
                })?;
                match (pair[0].as_str(), pair[1].as_str()) {
                    (Some(a), Some(b)) => Ok((NodeId::new(a), NodeId::new(b))),
                    _ => Err("dependency ids must be strings".to_string()),
                }
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return Err("dependencies must be an array".to_string()),
    };
    // The order must honor every dependency; an unsatisfiable (cyclic) set
    // can never pass this check.
    let pos = |id: &NodeId| subtask_order.iter().position(|n| n == id);
    for (before, after) in &dependencies {
        let (Some(b), Some(a)) = (pos(before), pos(after)) else {
            return Err(format!(
                "dependency ({before}, {after}) references an id outside subtask_order"
            ));
        };
        if b >= a {
            return Err(format!(
                "subtask_order violates dependency ({before} before {after})"
            ));
        }
    }

    let work_rank = match value.get("work_rank") {
        None | Some(Value::Null) => current_rank,
        Some(v) => v
            .as_u64()
            .and_then(|r| u32::try_from(r).ok())
            .filter(|r| *r >= 1)
            .ok_or("work_rank must be a positive integer")?,
    };
    let carried_context = value
        .get("carried_context")
        .and_then(Value::as_str)
        .unwrap_or(fallback_context)
        .to_string();

    Ok(Plan {
        target_node: node_id.clone(),
        subtask_order,
        dependencies,
        work_rank,
        carried_context,
    })
}
