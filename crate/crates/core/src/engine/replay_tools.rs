//! Tool runner for replay: serves recorded tool results instead of
//! executing anything.
//!
//! The result of a tool call appears verbatim in the next recorded request
//! (as the tool message the engine appended before calling the model again),
//! so replay pulls it from there and parses the accounting header back out.
//! Replay therefore has no side effects: no commands run, nothing is
//! written to the task folder.
//!
//! A call whose result appears in no recorded request is one the original
//! run executed right before its work slice expired; returning a
//! budget-consuming synthetic outcome steers the replayed engine down the
//! same timeout branch. A fully exhausted tape instead returns a free no-op
//! so the engine proceeds to its next model call and surfaces exhaustion
//! exactly where the original run did.

use std::sync::Arc;
use std::time::Duration;

use crate::audit::ReplaySource;
use crate::gateway::types::MessageRole;
use crate::sandbox::{parse_outcome_header, SandboxError, ToolOutcome, ToolRunner};

#[derive(Debug)]
pub struct ReplayToolRunner {
    source: Arc<ReplaySource>,
}

impl ReplayToolRunner {
    pub fn new(source: Arc<ReplaySource>) -> Self {
        ReplayToolRunner { source }
    }
}

impl ToolRunner for ReplayToolRunner {
    fn run_shell(
        &mut self,
        call_id: &str,
        _command: &str,
        timeout: Duration,
    ) -> Result<ToolOutcome, SandboxError> {
        let Some(upcoming) = self.source.peek() else {
            return Ok(ToolOutcome {
                content: "replay: tape exhausted".to_string(),
                exit_code: 0,
                duration_ms: 0,
                timed_out: false,
            });
        };
        // The current round's results are the trailing tool messages of the
        // upcoming request; ids disambiguate within the block.
        let messages = &upcoming.request.messages;
        let tail_start = messages
            .iter()
            .rposition(|m| m.role != MessageRole::Tool)
            .map(|i| i + 1)
            .unwrap_or(0);
        let recorded = messages[tail_start..]
            .iter()
            .find(|m| m.tool_call_id.as_deref() == Some(call_id));
        match recorded {
            Some(message) => {
                let (exit_code, timed_out, duration_ms) =
                    parse_outcome_header(&message.content).unwrap_or((0, false, 0));
                Ok(ToolOutcome {
                    content: message.content.clone(),
                    exit_code,
                    duration_ms,
                    timed_out,
                })
            }
            None => Ok(ToolOutcome {
                content: "replay: result not recorded (phase ended here)".to_string(),
                exit_code: -1,
                duration_ms: timeout.as_millis() as u64,
                timed_out: true,
            }),
        }
    }
}
