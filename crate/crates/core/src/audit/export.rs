//! Fine-tuning-style export of recorded calls.
//!
//! Emits one JSON line per recorded exchange: prompt, response, and the
//! verdict context of the iteration the call belonged to, with secrets
//! scrubbed per the redaction profile before anything leaves the process.

use std::path::Path;

use serde::Serialize;

use super::{load, AuditError};
use crate::gateway::types::{CompletionRequest, CompletionResponse};
use crate::memory::{EventKind, HistoryEvent};
use crate::sam::NodeId;
use crate::store::Phase;

/// Strings that must never appear in an export (credential values and
/// similar), and what to print instead.
#[derive(Debug, Clone)]
pub struct RedactionProfile {
    pub secrets: Vec<String>,
    pub replacement: String,
}

impl Default for RedactionProfile {
    fn default() -> Self {
        RedactionProfile {
            secrets: Vec::new(),
            replacement: "[REDACTED]".to_string(),
        }
    }
}

impl RedactionProfile {
    /// A profile that scrubs the current values of the given environment
    /// variables.
    pub fn from_env_vars(vars: &[String]) -> Self {
        let secrets = vars
            .iter()
            .filter_map(|v| std::env::var(v).ok())
            .filter(|v| !v.is_empty())
            .collect();
        RedactionProfile {
            secrets,
            ..Default::default()
        }
    }

    fn apply(&self, text: String) -> String {
        let mut out = text;
        for secret in &self.secrets {
            if !secret.is_empty() {
                out = out.replace(secret, &self.replacement);
            }
        }
        out
    }
}

/// One exported exchange.
#[derive(Debug, Clone, Serialize)]
pub struct ExportRecord {
    pub sequence: u64,
    pub phase: Phase,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_id: Option<NodeId>,
    pub iteration: u32,
    pub model: String,
    pub request: CompletionRequest,
    pub response: CompletionResponse,
    /// Judgment payload of the same (node, iteration), when one exists.
    pub verdict_context: String,
}

/// Export a run's records as redacted JSON lines. `history` supplies the
/// verdict context; pass the run's judgment events (or everything, the
/// filter here only looks at judgments).
pub fn export_records(
    audit_path: &Path,
    history: &[HistoryEvent],
    profile: &RedactionProfile,
) -> Result<Vec<String>, AuditError> {
    let (_, records) = load(audit_path)?;
    let mut lines = Vec::with_capacity(records.len());
    for record in records {
        let verdict_context = history
            .iter()
            .filter(|e| e.kind == EventKind::Judgment)
            .find(|e| {
                Some(&e.node_id) == record.node_id.as_ref() && e.iteration == record.iteration
            })
            .map(|e| e.payload.clone())
            .unwrap_or_default();
        let export = ExportRecord {
            sequence: record.sequence,
            phase: record.phase,
            node_id: record.node_id,
            iteration: record.iteration,
            model: record.model,
            request: record.request,
            response: record.response,
            verdict_context,
        };
        let json = serde_json::to_string(&export).expect("export record serializes");
        lines.push(profile.apply(json));
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::{AuditWriter, RunHeader};
    use crate::gateway::types::{CallContext, Message, RoleClass, SamplingParams};
    use crate::store::RunId;

    fn write_run(dir: &Path, calls: &[(&str, &str)]) -> std::path::PathBuf {
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
        for (prompt, reply) in calls {
            let ctx = CallContext::for_node(RunId::new("r1"), Phase::Work, NodeId::root(), 1);
            let request = CompletionRequest {
                role_class: RoleClass::Work,
                messages: vec![Message::user(*prompt)],
                tools: vec![],
                params: SamplingParams::default(),
            };
            let response = CompletionResponse {
                message: Message::assistant(*reply, vec![]),
                usage: None,
                finish_reason: "stop".into(),
            };
            writer
                .record_call(&ctx, "m", &request, &response, vec![], 1, 0.0, 1)
                .unwrap();
        }
        path
    }

    #[test]
    fn empty_run_exports_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_run(dir.path(), &[]);
        let lines = export_records(&path, &[], &RedactionProfile::default()).unwrap();
        assert!(lines.is_empty());
    }

    #[test]
    fn each_call_becomes_one_line_with_verdict_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_run(dir.path(), &[("p1", "r1"), ("p2", "r2")]);
        let history = vec![HistoryEvent {
            sequence: 1,
            run_id: RunId::new("r1"),
            iteration: 1,
            node_id: NodeId::root(),
            kind: EventKind::Judgment,
            payload: "pass: looks right".into(),
            timestamp: 0,
        }];
        let lines = export_records(&path, &history, &RedactionProfile::default()).unwrap();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("pass: looks right"));
    }

    #[test]
    fn secrets_never_appear_in_the_export() {
        let dir = tempfile::tempdir().unwrap();
        let secret = "sk-live-TOPSECRET123";
        let prompt = format!("use key {secret} to call the api");
        let path = write_run(dir.path(), &[(prompt.as_str(), "done")]);
        let profile = RedactionProfile {
            secrets: vec![secret.to_string()],
            replacement: "[REDACTED]".into(),
        };
        let lines = export_records(&path, &[], &profile).unwrap();
        for line in &lines {
            assert!(!line.contains(secret), "secret leaked: {line}");
            assert!(line.contains("[REDACTED]"));
        }
    }
}
