//! Verbatim model-call log.
//!
//! The gateway is the single choke point for model traffic, and this module
//! is its tap: every completion is written here, durable, before the
//! response is released to the caller. An unaudited run violates the safety
//! contract, so a write failure aborts the call instead of degrading.
//!
//! File format (line-delimited JSON under `<task>/.scifi/audit/<runid>.log`):
//! line 1 is the run header (`{"type":"header",...}`) pinning the run id,
//! the task-file digest, and the logical-clock origin; every following line
//! is one record (`{"type":"record",...}`) with a gap-free sequence starting
//! at 1. Failed provider attempts ride along on the record that finally
//! succeeded; the final exchange is the record.

mod export;
mod replay;

pub use export::{export_records, ExportRecord, RedactionProfile};
pub use replay::{ReplayError, ReplaySource};

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::TimestampMs;
use crate::gateway::types::{CallContext, CompletionRequest, CompletionResponse};
use crate::lock::FileLock;
use crate::sam::NodeId;
use crate::store::{Phase, RunId};

/// First line of every audit file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunHeader {
    pub run_id: RunId,
    /// Digest of the task file at run start; replay refuses a modified file.
    pub source_digest: String,
    /// Logical-clock origin for the run.
    pub created_at: TimestampMs,
}

/// A provider attempt that failed before the recorded exchange succeeded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptNote {
    pub model: String,
    pub error: String,
}

/// One engine invocation over this run (a resumed run has several). Replay
/// re-runs each invocation under its own recorded limits, which is what
/// makes an interrupted-and-resumed tape reproducible end to end.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationMarker {
    pub created_at: TimestampMs,
    pub max_iterations: u32,
    pub wall_time_limit_ms: u64,
    /// Effective per-iteration work slice, so replay reproduces timeout
    /// decisions under the exact same budget.
    pub work_slice_ms: u64,
}

/// One recorded model call. Field order is the wire order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub sequence: u64,
    pub run_id: RunId,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<NodeId>,
    #[serde(default)]
    pub iteration: u32,
    pub model: String,
    pub request: CompletionRequest,
    pub response: CompletionResponse,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attempts: Vec<AttemptNote>,
    pub latency_ms: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost: f64,
    pub timestamp: TimestampMs,
}

// Records dwarf the other line kinds; the enum only lives for one
// encode/decode.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum AuditLine {
    Header(RunHeader),
    Record(AuditRecord),
    Invocation(InvocationMarker),
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit log missing for run: {0}")]
    AuditMissing(PathBuf),
    #[error("audit log {file} has a sequence gap: expected {expected}, found {found}")]
    SequenceGap {
        file: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("audit log {file} is corrupt: {reason}")]
    StoreCorrupt { file: PathBuf, reason: String },
    #[error("audit log {file} belongs to run {found}, not {expected}")]
    RunMismatch {
        file: PathBuf,
        expected: RunId,
        found: RunId,
    },
    #[error(
        "task file digest {found} differs from the one recorded for this run ({expected}); \
         a resumed run must use the unmodified task file"
    )]
    TaskChanged { expected: String, found: String },
    #[error("audit io on {file}: {source}")]
    Io {
        file: PathBuf,
        source: std::io::Error,
    },
}

/// Appends records for one run. Exactly one writer exists per run (the
/// gateway tap); reopening an existing file resumes its sequence.
#[derive(Debug)]
pub struct AuditWriter {
    path: PathBuf,
    header: RunHeader,
    next_sequence: u64,
}

impl AuditWriter {
    /// Create the audit file with `header`, or resume an existing one after
    /// verifying it belongs to the same run. Returns the writer and the
    /// on-disk header (the original one when resuming, so the caller can
    /// seed the logical clock from it).
    pub fn open(path: &Path, header: RunHeader) -> Result<AuditWriter, AuditError> {
        if path.exists() {
            let (existing, records) = load(path)?;
            if existing.run_id != header.run_id {
                return Err(AuditError::RunMismatch {
                    file: path.to_path_buf(),
                    expected: header.run_id,
                    found: existing.run_id,
                });
            }
            // A resume must see the same task bytes the run started with.
            if existing.source_digest != header.source_digest {
                return Err(AuditError::TaskChanged {
                    expected: existing.source_digest,
                    found: header.source_digest,
                });
            }
            let next_sequence = records.last().map(|r| r.sequence).unwrap_or(0) + 1;
            return Ok(AuditWriter {
                path: path.to_path_buf(),
                header: existing,
                next_sequence,
            });
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| AuditError::Io {
                file: path.to_path_buf(),
                source: e,
            })?;
        }
        let writer = AuditWriter {
            path: path.to_path_buf(),
            header: header.clone(),
            next_sequence: 1,
        };
        writer.append_line(&AuditLine::Header(header))?;
        Ok(writer)
    }

    pub fn header(&self) -> &RunHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Record one completed exchange. The record is synced to disk before
    /// this returns; on failure the caller must abort the run.
    #[allow(clippy::too_many_arguments)]
    pub fn record_call(
        &mut self,
        ctx: &CallContext,
        model: &str,
        request: &CompletionRequest,
        response: &CompletionResponse,
        attempts: Vec<AttemptNote>,
        latency_ms: u64,
        cost: f64,
        timestamp: TimestampMs,
    ) -> Result<u64, AuditError> {
        let usage = response.usage.unwrap_or_default();
        let record = AuditRecord {
            sequence: self.next_sequence,
            run_id: ctx.run_id.clone(),
            phase: ctx.phase,
            node_id: ctx.node_id.clone(),
            iteration: ctx.iteration,
            model: model.to_string(),
            request: request.clone(),
            response: response.clone(),
            attempts,
            latency_ms,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            cost,
            timestamp,
        };
        self.append_line(&AuditLine::Record(record))?;
        let seq = self.next_sequence;
        self.next_sequence += 1;
        Ok(seq)
    }

    /// Mark the start of one engine invocation (its limits pin the replay).
    pub fn append_invocation(&mut self, marker: InvocationMarker) -> Result<(), AuditError> {
        self.append_line(&AuditLine::Invocation(marker))
    }

    fn append_line(&self, line: &AuditLine) -> Result<(), AuditError> {
        let io_err = |e| AuditError::Io {
            file: self.path.clone(),
            source: e,
        };
        let _lock = FileLock::exclusive(&self.path).map_err(io_err)?;
        let json = serde_json::to_string(line).expect("audit line serializes");
        let mut handle = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io_err)?;
        handle
            .write_all(format!("{json}\n").as_bytes())
            .and_then(|_| handle.sync_data())
            .map_err(io_err)?;
        Ok(())
    }
}

/// Read a full audit file, verifying the header and the gap-free sequence.
pub fn load(path: &Path) -> Result<(RunHeader, Vec<AuditRecord>), AuditError> {
    let (header, records, _) = load_with_invocations(path)?;
    Ok((header, records))
}

/// An invocation marker paired with the number of records that preceded it
/// (the tape position where that invocation starts).
pub type PositionedInvocation = (usize, InvocationMarker);

/// Like [`load`], also returning the invocation markers in file order.
pub fn load_with_invocations(
    path: &Path,
) -> Result<(RunHeader, Vec<AuditRecord>, Vec<PositionedInvocation>), AuditError> {
    if !path.exists() {
        return Err(AuditError::AuditMissing(path.to_path_buf()));
    }
    let raw = std::fs::read_to_string(path).map_err(|e| AuditError::Io {
        file: path.to_path_buf(),
        source: e,
    })?;
    let corrupt = |reason: String| AuditError::StoreCorrupt {
        file: path.to_path_buf(),
        reason,
    };

    let mut header: Option<RunHeader> = None;
    let mut records: Vec<AuditRecord> = Vec::new();
    let mut invocations: Vec<(usize, InvocationMarker)> = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: AuditLine =
            serde_json::from_str(line).map_err(|e| corrupt(format!("line {}: {e}", idx + 1)))?;
        match parsed {
            AuditLine::Header(h) => {
                if header.is_some() {
                    return Err(corrupt(format!("line {}: second header", idx + 1)));
                }
                if !records.is_empty() {
                    return Err(corrupt(format!("line {}: header after records", idx + 1)));
                }
                header = Some(h);
            }
            AuditLine::Invocation(m) => {
                if header.is_none() {
                    return Err(corrupt(format!("line {}: invocation before header", idx + 1)));
                }
                invocations.push((records.len(), m));
            }
            AuditLine::Record(r) => {
                if header.is_none() {
                    return Err(corrupt(format!("line {}: record before header", idx + 1)));
                }
                let expected = records.last().map(|p: &AuditRecord| p.sequence).unwrap_or(0) + 1;
                if r.sequence != expected {
                    return Err(AuditError::SequenceGap {
                        file: path.to_path_buf(),
                        expected,
                        found: r.sequence,
                    });
                }
                records.push(r);
            }
        }
    }
    let header = header.ok_or_else(|| corrupt("no header line".to_string()))?;
    Ok((header, records, invocations))
}
