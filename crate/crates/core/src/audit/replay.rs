//! Replay source: serves a recorded run back as a model backend.
//!
//! Each call verifies that the request the engine produced matches the
//! recorded one (exact match on the canonical JSON of the semantic payload;
//! timestamps never appear inside requests because stores stamp with logical
//! time), then returns the recorded response. A divergence is reported with
//! the sequence number and a short diff location rather than silently
//! serving the wrong response.
//!
//! A fully consumed tape behaves like an exhausted budget: the caller gets
//! `TapeExhausted` and is expected to wind the run down exactly as the
//! original did when its models were disabled.

use std::path::Path;
use std::sync::Mutex;

use thiserror::Error;

use super::{
    load_with_invocations, AuditError, AuditRecord, InvocationMarker, PositionedInvocation,
    RunHeader,
};
use crate::gateway::types::{CallContext, CompletionRequest};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("request {sequence} diverges from the recorded run: {diff}")]
    RequestMismatch { sequence: u64, diff: String },
    #[error("recorded tape exhausted after {consumed} calls")]
    TapeExhausted { consumed: u64 },
    /// The current invocation's window ended mid-flight: the original
    /// process was killed here. The replayed invocation must abandon its
    /// in-flight iteration exactly like the kill did.
    #[error("recorded invocation ended after {consumed} calls (original process was interrupted)")]
    InvocationEnded { consumed: u64 },
}

/// Cursor over the records of one run, optionally capped to the window of
/// the invocation currently being replayed.
#[derive(Debug)]
pub struct ReplaySource {
    header: RunHeader,
    records: Vec<AuditRecord>,
    invocations: Vec<PositionedInvocation>,
    cursor: Mutex<usize>,
    window_end: Mutex<usize>,
}

impl ReplaySource {
    /// Load a run's audit file. Fails if the file is missing, corrupt, or
    /// has a sequence gap.
    pub fn open(audit_path: &Path) -> Result<ReplaySource, ReplayError> {
        let (header, records, invocations) = load_with_invocations(audit_path)?;
        let total = records.len();
        Ok(ReplaySource {
            header,
            records,
            invocations,
            cursor: Mutex::new(0),
            window_end: Mutex::new(total),
        })
    }

    pub fn header(&self) -> &RunHeader {
        &self.header
    }

    pub fn record_count(&self) -> u64 {
        self.records.len() as u64
    }

    /// Engine invocations recorded on this tape: each marker with the half
    /// open record range `[start, end)` it covers.
    pub fn invocation_windows(&self) -> Vec<(InvocationMarker, usize, usize)> {
        let mut out = Vec::with_capacity(self.invocations.len());
        for (i, (start, marker)) in self.invocations.iter().enumerate() {
            let end = self
                .invocations
                .get(i + 1)
                .map(|(next_start, _)| *next_start)
                .unwrap_or(self.records.len());
            out.push((marker.clone(), *start, end));
        }
        out
    }

    /// Cap consumption at `end`. Requests past the cap report
    /// [`ReplayError::InvocationEnded`] (or `TapeExhausted` when the cap is
    /// the true end of the tape).
    pub fn set_window_end(&self, end: usize) {
        *self.window_end.lock().expect("replay window poisoned") = end.min(self.records.len());
    }

    /// Verify `request` against the next record and consume it.
    pub fn next_exchange(
        &self,
        ctx: &CallContext,
        request: &CompletionRequest,
    ) -> Result<AuditRecord, ReplayError> {
        let mut cursor = self.cursor.lock().expect("replay cursor poisoned");
        let window_end = *self.window_end.lock().expect("replay window poisoned");
        if *cursor >= window_end {
            if window_end < self.records.len() {
                return Err(ReplayError::InvocationEnded {
                    consumed: *cursor as u64,
                });
            }
            return Err(ReplayError::TapeExhausted {
                consumed: *cursor as u64,
            });
        }
        let record = &self.records[*cursor];
        if record.phase != ctx.phase {
            return Err(ReplayError::RequestMismatch {
                sequence: record.sequence,
                diff: format!(
                    "phase: recorded {}, replaying {}",
                    record.phase, ctx.phase
                ),
            });
        }
        let recorded = record.request.canonical_json();
        let replayed = request.canonical_json();
        if recorded != replayed {
            return Err(ReplayError::RequestMismatch {
                sequence: record.sequence,
                diff: first_difference(&recorded, &replayed),
            });
        }
        *cursor += 1;
        Ok(record.clone())
    }

    /// The next record within the window, without consuming it. The replay
    /// tool runner peeks here to pull recorded tool results out of the
    /// upcoming request.
    pub fn peek(&self) -> Option<AuditRecord> {
        let cursor = self.cursor.lock().expect("replay cursor poisoned");
        let window_end = *self.window_end.lock().expect("replay window poisoned");
        if *cursor >= window_end {
            return None;
        }
        self.records.get(*cursor).cloned()
    }
}

fn first_difference(recorded: &str, replayed: &str) -> String {
    let idx = recorded
        .bytes()
        .zip(replayed.bytes())
        .position(|(a, b)| a != b)
        .unwrap_or_else(|| recorded.len().min(replayed.len()));
    let window = |s: &str| {
        let start = idx.saturating_sub(40);
        let end = (idx + 40).min(s.len());
        // Clamp to char boundaries.
        let start = (start..=idx).find(|i| s.is_char_boundary(*i)).unwrap_or(idx);
        let end = (end..s.len().min(end + 4))
            .find(|i| s.is_char_boundary(*i))
            .unwrap_or(s.len());
        s[start..end].to_string()
    };
    format!(
        "first difference at byte {idx}: recorded ...{:?}... vs replayed ...{:?}...",
        window(recorded),
        window(replayed)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::AuditWriter;
    use crate::gateway::types::{CompletionResponse, Message, RoleClass, SamplingParams};
    use crate::store::{Phase, RunId};

    fn request(text: &str) -> CompletionRequest {
        CompletionRequest {
            role_class: RoleClass::Control,
            messages: vec![Message::user(text)],
            tools: vec![],
            params: SamplingParams::default(),
        }
    }

    fn response(text: &str) -> CompletionResponse {
        CompletionResponse {
            message: Message::assistant(text, vec![]),
            usage: None,
            finish_reason: "stop".into(),
        }
    }

    fn recorded_run(dir: &Path, texts: &[&str]) -> std::path::PathBuf {
        let path = dir.join("r1.log");
        let mut writer = AuditWriter::open(
            &path,
            RunHeader {
                run_id: RunId::new("r1"),
                source_digest: "d".into(),
                created_at: 0,
            },
        )
        .unwrap();
        let ctx = CallContext::new(RunId::new("r1"), Phase::PreScan);
        for text in texts {
            writer
                .record_call(&ctx, "m", &request(text), &response("ok"), vec![], 1, 0.0, 1)
                .unwrap();
        }
        path
    }

    #[test]
    fn matching_requests_replay_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = recorded_run(dir.path(), &["one", "two"]);
        let source = ReplaySource::open(&path).unwrap();
        let ctx = CallContext::new(RunId::new("r1"), Phase::PreScan);
        let first = source.next_exchange(&ctx, &request("one")).unwrap();
        assert_eq!(first.sequence, 1);
        let second = source.next_exchange(&ctx, &request("two")).unwrap();
        assert_eq!(second.sequence, 2);
        assert!(matches!(
            source.next_exchange(&ctx, &request("three")),
            Err(ReplayError::TapeExhausted { consumed: 2 })
        ));
    }

    #[test]
    fn diverging_request_reports_the_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let path = recorded_run(dir.path(), &["one", "two", "three", "four"]);
        let source = ReplaySource::open(&path).unwrap();
        let ctx = CallContext::new(RunId::new("r1"), Phase::PreScan);
        for text in ["one", "two", "three"] {
            source.next_exchange(&ctx, &request(text)).unwrap();
        }
        match source.next_exchange(&ctx, &request("FOUR")) {
            Err(ReplayError::RequestMismatch { sequence: 4, diff }) => {
                assert!(diff.contains("first difference"), "diff: {diff}");
            }
            other => panic!("expected mismatch at 4, got {other:?}"),
        }
    }

    #[test]
    fn wrong_phase_is_a_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = recorded_run(dir.path(), &["one"]);
        let source = ReplaySource::open(&path).unwrap();
        let ctx = CallContext::new(RunId::new("r1"), Phase::Review);
        assert!(matches!(
            source.next_exchange(&ctx, &request("one")),
            Err(ReplayError::RequestMismatch { sequence: 1, .. })
        ));
    }
}
