//! Prompt assembly for the three loop agents.
//!
//! Everything here is a pure function of parsed task state, memory, and
//! history, so identical store state always produces byte-identical
//! requests. That is what makes recorded runs replayable. The iteration
//! index is embedded in each user message both for the reader and so
//! scripted fixtures can key rules on it.

use serde_json::json;

use crate::gateway::types::ToolSchema;
use crate::memory::{HistoryEvent, MemoryEntry};
use crate::skills::Skill;

pub const PRE_SCAN_SYSTEM: &str = "You are the pre-scan agent of a closed-loop task runner. \
Read the task, the memory, and the recent history, then plan this iteration. Answer with a \
single JSON object and nothing else, shaped as: {\"subtask_order\": [\"<pending sub-task ids \
in execution order>\"], \"dependencies\": [[\"<before id>\", \"<after id>\"]], \"work_rank\": \
<integer capability rank for the work model>, \"carried_context\": \"<what the work agent \
must know from memory and prior iterations>\"}. subtask_order must contain exactly the \
pending sub-task ids, reordered only to honor dependencies.";

pub const WORK_SYSTEM_BASE: &str = "You are the work agent of a closed-loop task runner, \
operating unattended inside a sandbox where only the task folder is accessible. Carry out \
the to-do using the shell tool; every command runs in the task folder. Work in small steps \
and check your own results. When you believe the expectation is met, call \
task_complete(completed=true, summary=...). If you cannot proceed, call \
task_complete(completed=false, summary=...). Never modify the task description file.";

pub const REVIEW_SYSTEM: &str = "You are the independent review agent of a closed-loop task \
runner. Verify strictly whether the expectation below is met in the actual task folder. The \
work agent's claims are not evidence; check the real state with read-only shell commands \
(do not write or modify anything). When certain, call verdict(outcome=\"pass\" or \"fail\", \
reason=..., suggested_fixes=...). On fail, reason must say what is missing and \
suggested_fixes must tell the next iteration what to change. Include work_rank=<integer> \
only if the work model is underpowered or overpowered for this task.";

pub const FINAL_REVIEW_SYSTEM: &str = "You are the final task-review agent. Distill the run's \
task memory and history into durable lessons. Answer with a single JSON object and nothing \
else: {\"task_group\": \"<suggestions for future runs of this same task>\", \"global\": \
\"<system-level suggestions that apply across tasks>\"}.";

/// Tool offered to the work and review agents.
pub fn shell_tool() -> ToolSchema {
    ToolSchema {
        name: "shell".to_string(),
        description: "Run a shell command in the sandboxed task folder and return its output."
            .to_string(),
        parameters: json!({
            "type": "object",
            "properties": {
                "command": {"type": "string", "description": "Command for /bin/sh -c"}
            },
            "required": ["command"]
        }),
    }
}

/// Completion claim tool for the work agent.
pub fn task_complete_tool() -> ToolSchema {
    ToolSchema {
        name: "task_complete".to_string(),
        description: "Declare the to-do finished (or impossible) and end this work turn."
            .to_string(),
        parameters: json!({
            "type": "object",
            "properties": {
                "completed": {"type": "boolean"},
                "summary": {"type": "string"}
            },
            "required": ["completed", "summary"]
        }),
    }
}

/// Verdict tool for the review agent.
pub fn verdict_tool() -> ToolSchema {
    ToolSchema {
        name: "verdict".to_string(),
        description: "Deliver the review verdict for this iteration.".to_string(),
        parameters: json!({
            "type": "object",
            "properties": {
                "outcome": {"type": "string", "enum": ["pass", "fail"]},
                "reason": {"type": "string"},
                "suggested_fixes": {"type": "string"},
                "work_rank": {"type": "integer"}
            },
            "required": ["outcome", "reason"]
        }),
    }
}

/// Memory dump block shared by the control prompts.
fn memory_block(label: &str, entries: &[MemoryEntry]) -> String {
    format!("{label}:\n{}", crate::memory::render_entries(entries))
}

fn history_block(events: &[HistoryEvent]) -> String {
    if events.is_empty() {
        return "Recent history:\n(empty)\n".to_string();
    }
    let mut out = String::from("Recent history:\n");
    for event in events {
        out.push_str(&format!(
            "[seq {} iter {} node {}] {}: {}\n",
            event.sequence,
            event.iteration,
            event.node_id,
            match event.kind {
                crate::memory::EventKind::IterationStatus => "status",
                crate::memory::EventKind::Judgment => "judgment",
                crate::memory::EventKind::DirectionChange => "direction",
            },
            event.payload
        ));
    }
    out
}

pub fn pre_scan_user(
    iteration: u32,
    current_rank: u32,
    rendering: &str,
    task_memory: &[MemoryEntry],
    group_memory: &[MemoryEntry],
    history_tail: &[HistoryEvent],
) -> String {
    format!(
        "iteration: {iteration}\ncurrent work rank: {current_rank}\n\n{rendering}\n{}\n{}\n{}",
        memory_block("Task memory", task_memory),
        memory_block("Group memory", group_memory),
        history_block(history_tail),
    )
}

/// Work system prompt with the selected skill bodies injected verbatim.
pub fn work_system(skills: &[Skill]) -> String {
    let mut out = String::from(WORK_SYSTEM_BASE);
    if !skills.is_empty() {
        out.push_str("\n\nSkills available for this task:\n");
        for skill in skills {
            out.push_str(&format!("### skill: {}\n{}\n", skill.name, skill.body));
        }
    }
    out
}

pub fn work_user(iteration: u32, rendering: &str, carried_context: &str) -> String {
    format!(
        "iteration: {iteration}\n\n{rendering}\nContext from the plan:\n{}\n",
        if carried_context.is_empty() {
            "(none)"
        } else {
            carried_context
        }
    )
}

pub fn review_user(
    iteration: u32,
    expectation: &str,
    claim_label: &str,
    narrative: &str,
    tool_trace: &str,
    history_tail: &[HistoryEvent],
) -> String {
    let mut out = format!(
        "iteration: {iteration}\n\nExpectation (verbatim from the task file):\n{expectation}\n\n\
Work claim: {claim_label}\nWork narrative:\n{narrative}\nTool trace:\n{tool_trace}\n",
    );
    if !history_tail.is_empty() {
        out.push('\n');
        out.push_str(&history_block(history_tail));
    }
    out
}

pub fn final_review_user(
    outcome_summary: &str,
    task_memory: &[MemoryEntry],
    history: &[HistoryEvent],
) -> String {
    format!(
        "run outcome: {outcome_summary}\n\n{}\n{}",
        memory_block("Task memory", task_memory),
        history_block(history),
    )
}
