//! Scoped memory files and the append-only history tape.
//!
//! Memory is a read-update interface over three scopes: task (one file per
//! run), task-group (shared across runs of one task), and global (shared
//! across tasks). Files are plain Markdown with one reserved heading per
//! section; each entry sits under its section behind a marker comment
//! carrying its id, logical timestamp, and author phase:
//!
//! ```text
//! ## findings
//!
//! <!-- entry 3 | 1754769000000 | review -->
//! body text
//! ```
//!
//! The `suggestions` section keeps only its latest entry (the next pre-scan
//! needs the current fix, not the backlog); all other sections accumulate.
//! Writes go through an exclusive file lock and a write-then-rename cycle so
//! concurrent runs sharing the group or global file never observe a torn
//! state and a crash after return never loses the entry.
//!
//! History is a different animal: a strictly append-only tape of JSON-line
//! events. There is no API to rewrite or delete; readers get events back in
//! sequence order.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::TimestampMs;
use crate::lock::FileLock;
use crate::sam::NodeId;
use crate::store::{Phase, RunId, StorePaths};

/// Memory scope: which file an entry lives in.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "key", rename_all = "kebab-case")]
pub enum MemoryScope {
    /// Shared by agents within one run.
    Task(RunId),
    /// Shared across runs of the same task.
    TaskGroup,
    /// Shared across all tasks.
    Global,
}

impl fmt::Display for MemoryScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemoryScope::Task(run) => write!(f, "task({run})"),
            MemoryScope::TaskGroup => f.write_str("task-group"),
            MemoryScope::Global => f.write_str("global"),
        }
    }
}

/// Reserved memory sections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Section {
    #[serde(rename = "failure-patterns")]
    FailurePatterns,
    #[serde(rename = "explored-paths")]
    ExploredPaths,
    #[serde(rename = "findings")]
    Findings,
    #[serde(rename = "suggestions")]
    Suggestions,
}

impl Section {
    pub fn as_str(self) -> &'static str {
        match self {
            Section::FailurePatterns => "failure-patterns",
            Section::ExploredPaths => "explored-paths",
            Section::Findings => "findings",
            Section::Suggestions => "suggestions",
        }
    }

    fn from_heading(s: &str) -> Option<Self> {
        match s {
            "failure-patterns" => Some(Section::FailurePatterns),
            "explored-paths" => Some(Section::ExploredPaths),
            "findings" => Some(Section::Findings),
            "suggestions" => Some(Section::Suggestions),
            _ => None,
        }
    }

    const ALL: [Section; 4] = [
        Section::FailurePatterns,
        Section::ExploredPaths,
        Section::Findings,
        Section::Suggestions,
    ];
}

/// One memory entry as read back from a scope file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryEntry {
    pub scope: MemoryScope,
    pub section: Section,
    pub body: String,
    pub updated_at: TimestampMs,
    pub author_phase: Phase,
    /// Monotone id within the scope file; read order sorts by this.
    pub entry_id: u64,
}

/// History event kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    #[serde(rename = "iteration-status")]
    IterationStatus,
    #[serde(rename = "judgment")]
    Judgment,
    #[serde(rename = "direction-change")]
    DirectionChange,
}

/// One record on the history tape. Field order is the wire order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub sequence: u64,
    pub run_id: RunId,
    pub iteration: u32,
    pub node_id: NodeId,
    pub kind: EventKind,
    pub payload: String,
    pub timestamp: TimestampMs,
}

/// Selects history events on read; `None` fields match everything.
#[derive(Debug, Clone, Default)]
pub struct EventFilter {
    pub kind: Option<EventKind>,
    pub node: Option<NodeId>,
}

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("phase {phase} may not write {scope} memory")]
    ForbiddenWriter { phase: Phase, scope: MemoryScope },
    #[error("store file {file} is corrupt: {reason}")]
    StoreCorrupt { file: PathBuf, reason: String },
    #[error("store io on {file}: {source}")]
    Io {
        file: PathBuf,
        source: std::io::Error,
    },
}

/// Writer matrix: which phase may write which scope. Pre-scan and work read
/// everything but write nothing; review owns task memory; final-review owns
/// task-group and global.
pub fn may_write(phase: Phase, scope: &MemoryScope) -> bool {
    matches!(
        (phase, scope),
        (Phase::Review, MemoryScope::Task(_))
            | (Phase::FinalReview, MemoryScope::TaskGroup | MemoryScope::Global)
    )
}

/// Handle to the memory files and history tape of one task/store layout.
#[derive(Debug, Clone)]
pub struct MemoryStore {
    paths: StorePaths,
}

impl MemoryStore {
    pub fn new(paths: StorePaths) -> Self {
        MemoryStore { paths }
    }

    fn scope_file(&self, scope: &MemoryScope) -> PathBuf {
        match scope {
            MemoryScope::Task(run) => self.paths.task_memory_file(run),
            MemoryScope::TaskGroup => self.paths.group_memory_file(),
            MemoryScope::Global => self.paths.global_memory_file(),
        }
    }

    /// All entries of a scope in update order. A scope that was never
    /// written reads as empty, never as an error.
    pub fn read_memory(&self, scope: &MemoryScope) -> Result<Vec<MemoryEntry>, MemoryError> {
        let file = self.scope_file(scope);
        if !file.exists() {
            return Ok(Vec::new());
        }
        let _lock = FileLock::exclusive(&file).map_err(|e| MemoryError::Io {
            file: file.clone(),
            source: e,
        })?;
        let mut entries = parse_scope_file(&file, scope)?;
        entries.sort_by_key(|e| e.entry_id);
        Ok(entries)
    }

    /// Append (or, for `suggestions`, replace) an entry. Durable before
    /// return via write-then-rename.
    pub fn update_memory(
        &self,
        scope: &MemoryScope,
        section: Section,
        body: &str,
        author_phase: Phase,
        now: TimestampMs,
    ) -> Result<u64, MemoryError> {
        if !may_write(author_phase, scope) {
            return Err(MemoryError::ForbiddenWriter {
                phase: author_phase,
                scope: scope.clone(),
            });
        }
        let file = self.scope_file(scope);
        if let Some(parent) = file.parent() {
            std::fs::create_dir_all(parent).map_err(|e| MemoryError::Io {
                file: file.clone(),
                source: e,
            })?;
        }
        let _lock = FileLock::exclusive(&file).map_err(|e| MemoryError::Io {
            file: file.clone(),
            source: e,
        })?;
        let mut entries = if file.exists() {
            parse_scope_file(&file, scope)?
        } else {
            Vec::new()
        };
        let entry_id = entries.iter().map(|e| e.entry_id).max().unwrap_or(0) + 1;
        if section == Section::Suggestions {
            entries.retain(|e| e.section != Section::Suggestions);
        }
        entries.push(MemoryEntry {
            scope: scope.clone(),
            section,
            body: body.to_string(),
            updated_at: now,
            author_phase,
            entry_id,
        });
        write_scope_file(&file, scope, &entries)?;
        Ok(entry_id)
    }

    /// Append one event to the run's history tape; returns its sequence.
    pub fn append_history(&self, event: NewHistoryEvent<'_>) -> Result<u64, MemoryError> {
        let file = self.paths.history_file(event.run_id);
        if let Some(parent) = file.parent() {
            std::fs::create_dir_all(parent).map_err(|e| MemoryError::Io {
                file: file.clone(),
                source: e,
            })?;
        }
        let _lock = FileLock::exclusive(&file).map_err(|e| MemoryError::Io {
            file: file.clone(),
            source: e,
        })?;
        let last = last_history_sequence(&file)?;
        let record = HistoryEvent {
            sequence: last + 1,
            run_id: event.run_id.clone(),
            iteration: event.iteration,
            node_id: event.node_id.clone(),
            kind: event.kind,
            payload: event.payload.to_string(),
            timestamp: event.timestamp,
        };
        let line = serde_json::to_string(&record).expect("history event serializes");
        let mut handle = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&file)
            .map_err(|e| MemoryError::Io {
                file: file.clone(),
                source: e,
            })?;
        handle
            .write_all(format!("{line}\n").as_bytes())
            .and_then(|_| handle.sync_data())
            .map_err(|e| MemoryError::Io {
                file: file.clone(),
                source: e,
            })?;
        Ok(record.sequence)
    }

    /// Events of a run matching the filter, in sequence order. Unknown run
    /// reads as empty.
    pub fn read_history(
        &self,
        run_id: &RunId,
        filter: &EventFilter,
    ) -> Result<Vec<HistoryEvent>, MemoryError> {
        let file = self.paths.history_file(run_id);
        if !file.exists() {
            return Ok(Vec::new());
        }
        let raw = std::fs::read_to_string(&file).map_err(|e| MemoryError::Io {
            file: file.clone(),
            source: e,
        })?;
        let mut out = Vec::new();
        for (idx, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let event: HistoryEvent =
                serde_json::from_str(line).map_err(|e| MemoryError::StoreCorrupt {
                    file: file.clone(),
                    reason: format!("line {}: {e}", idx + 1),
                })?;
            let kind_ok = filter.kind.is_none_or(|k| k == event.kind);
            let node_ok = filter.node.as_ref().is_none_or(|n| *n == event.node_id);
            if kind_ok && node_ok {
                out.push(event);
            }
        }
        Ok(out)
    }
}

/// Borrowed form of a history event about to be appended; the store assigns
/// the sequence number.
#[derive(Debug)]
pub struct NewHistoryEvent<'a> {
    pub run_id: &'a RunId,
    pub iteration: u32,
    pub node_id: &'a NodeId,
    pub kind: EventKind,
    pub payload: &'a str,
    pub timestamp: TimestampMs,
}

fn last_history_sequence(file: &Path) -> Result<u64, MemoryError> {
    if !file.exists() {
        return Ok(0);
    }
    let raw = std::fs::read_to_string(file).map_err(|e| MemoryError::Io {
        file: file.to_path_buf(),
        source: e,
    })?;
    let Some(last) = raw.lines().rev().find(|l| !l.trim().is_empty()) else {
        return Ok(0);
    };
    let event: HistoryEvent =
        serde_json::from_str(last).map_err(|e| MemoryError::StoreCorrupt {
            file: file.to_path_buf(),
            reason: format!("last line: {e}"),
        })?;
    Ok(event.sequence)
}

fn phase_from_marker(s: &str) -> Option<Phase> {
    match s {
        "pre-scan" => Some(Phase::PreScan),
        "work" => Some(Phase::Work),
        "review" => Some(Phase::Review),
        "final-review" => Some(Phase::FinalReview),
        "ui-tool" => Some(Phase::UiTool),
        _ => None,
    }
}

fn parse_scope_file(file: &Path, scope: &MemoryScope) -> Result<Vec<MemoryEntry>, MemoryError> {
    let raw = std::fs::read_to_string(file).map_err(|e| MemoryError::Io {
        file: file.to_path_buf(),
        source: e,
    })?;
    let corrupt = |reason: String| MemoryError::StoreCorrupt {
        file: file.to_path_buf(),
        reason,
    };

    let mut entries: Vec<MemoryEntry> = Vec::new();
    let mut section: Option<Section> = None;
    let mut pending: Option<(u64, TimestampMs, Phase)> = None;
    let mut body: Vec<&str> = Vec::new();

    let flush = |section: Option<Section>,
                 pending: &mut Option<(u64, TimestampMs, Phase)>,
                 body: &mut Vec<&str>,
                 entries: &mut Vec<MemoryEntry>| {
        if let Some((entry_id, updated_at, author_phase)) = pending.take() {
            let section = section.expect("entry marker outside section already rejected");
            entries.push(MemoryEntry {
                scope: scope.clone(),
                section,
                body: body.join("\n").trim().to_string(),
                updated_at,
                author_phase,
                entry_id,
            });
        }
        body.clear();
    };

    for (idx, line) in raw.lines().enumerate() {
        if let Some(heading) = line.strip_prefix("## ") {
            flush(section, &mut pending, &mut body, &mut entries);
            section = Some(
                Section::from_heading(heading.trim())
                    .ok_or_else(|| corrupt(format!("line {}: unknown section heading", idx + 1)))?,
            );
        } else if let Some(marker) = line
            .trim()
            .strip_prefix("<!-- entry ")
            .and_then(|rest| rest.strip_suffix(" -->"))
        {
            flush(section, &mut pending, &mut body, &mut entries);
            if section.is_none() {
                return Err(corrupt(format!("line {}: entry outside any section", idx + 1)));
            }
            let parts: Vec<&str> = marker.split(" | ").collect();
            let [id, ts, phase] = parts.as_slice() else {
                return Err(corrupt(format!("line {}: bad entry marker", idx + 1)));
            };
            let entry_id = id
                .parse::<u64>()
                .map_err(|_| corrupt(format!("line {}: bad entry id", idx + 1)))?;
            let updated_at = ts
                .parse::<TimestampMs>()
                .map_err(|_| corrupt(format!("line {}: bad timestamp", idx + 1)))?;
            let author = phase_from_marker(phase)
                .ok_or_else(|| corrupt(format!("line {}: bad author phase", idx + 1)))?;
            pending = Some((entry_id, updated_at, author));
        } else if pending.is_some() {
            body.push(line);
        }
    }
    flush(section, &mut pending, &mut body, &mut entries);
    Ok(entries)
}

fn write_scope_file(
    file: &Path,
    scope: &MemoryScope,
    entries: &[MemoryEntry],
) -> Result<(), MemoryError> {
    let mut out = String::new();
    let title = match scope {
        MemoryScope::Task(run) => format!("task memory for run {run}"),
        MemoryScope::TaskGroup => "task-group memory".to_string(),
        MemoryScope::Global => "global memory".to_string(),
    };
    out.push_str(&format!("<!-- {title}; managed file, edit via the store -->\n"));
    for section in Section::ALL {
        let mut in_section: Vec<&MemoryEntry> =
            entries.iter().filter(|e| e.section == section).collect();
        if in_section.is_empty() {
            continue;
        }
        in_section.sort_by_key(|e| e.entry_id);
        out.push_str(&format!("\n## {}\n", section.as_str()));
        for entry in in_section {
            out.push_str(&format!(
                "\n<!-- entry {} | {} | {} -->\n{}\n",
                entry.entry_id,
                entry.updated_at,
                entry.author_phase.as_str(),
                entry.body
            ));
        }
    }

    let tmp = file.with_extension("md.tmp");
    {
        let mut handle = std::fs::File::create(&tmp).map_err(|e| MemoryError::Io {
            file: tmp.clone(),
            source: e,
        })?;
        handle
            .write_all(out.as_bytes())
            .and_then(|_| handle.sync_data())
            .map_err(|e| MemoryError::Io {
                file: tmp.clone(),
                source: e,
            })?;
    }
    std::fs::rename(&tmp, file).map_err(|e| MemoryError::Io {
        file: file.to_path_buf(),
        source: e,
    })
}

/// Why a final review could not complete.
#[derive(Debug, Error)]
pub enum FinalizeError {
    #[error(transparent)]
    Memory(#[from] MemoryError),
    /// Fatal gateway failure (audit write, replay divergence). Plain model
    /// unavailability is not an error; it degrades to stub entries.
    #[error("final review gateway failure: {0}")]
    Gateway(crate::gateway::GatewayError),
}

/// What [`finalize`] wrote.
#[derive(Debug, Clone)]
pub struct FinalizeOutput {
    pub task_group: Vec<MemoryEntry>,
    pub global: Vec<MemoryEntry>,
    /// True when distillation was skipped and stubs were written instead.
    pub skipped: bool,
}

/// Final task review: distill the run's task memory and history into
/// task-group and global suggestions via a control model, and persist both.
/// Runs for every ended run regardless of outcome; failures are often the
/// richest memory. With no usable model it writes deterministic stub
/// entries instead of losing the run silently.
pub fn finalize(
    store: &MemoryStore,
    gateway: &crate::gateway::Gateway,
    run_id: &RunId,
    outcome_summary: &str,
) -> Result<FinalizeOutput, FinalizeError> {
    use crate::engine::prompts::{final_review_user, FINAL_REVIEW_SYSTEM};
    use crate::gateway::types::{
        CallContext, CompletionRequest, Message, RoleClass, SamplingParams,
    };
    use crate::gateway::GatewayError;

    let task_memory = store.read_memory(&MemoryScope::Task(run_id.clone()))?;
    let history = store.read_history(run_id, &EventFilter::default())?;

    let request = CompletionRequest {
        role_class: RoleClass::Control,
        messages: vec![
            Message::system(FINAL_REVIEW_SYSTEM),
            Message::user(final_review_user(outcome_summary, &task_memory, &history)),
        ],
        tools: vec![],
        params: SamplingParams::default(),
    };
    let ctx = CallContext::new(run_id.clone(), Phase::FinalReview);
    let rank = gateway.control_rank();

    let (group_text, global_text, skipped) =
        match gateway.complete(&ctx, RoleClass::Control, rank, None, &request) {
            Ok(done) => {
                let content = done.response.message.content;
                let parsed = extract_distillation(&content);
                match parsed {
                    Some((group, global)) => (group, global, false),
                    // Unparseable distillation: keep the raw text rather
                    // than losing it.
                    None => (content.trim().to_string(), content.trim().to_string(), false),
                }
            }
            Err(GatewayError::NoUsableModel { .. } | GatewayError::AllProvidersFailed { .. }) => {
                let stub = format!(
                    "distillation skipped: no usable model (run ended: {outcome_summary})"
                );
                (stub.clone(), stub, true)
            }
            Err(e) => return Err(FinalizeError::Gateway(e)),
        };

    let now = gateway.clock().now_ms();
    let mut task_group = Vec::new();
    let mut global = Vec::new();

    let findings_body = format!("run {run_id} ({outcome_summary}): {group_text}");
    let id = store.update_memory(
        &MemoryScope::TaskGroup,
        Section::Findings,
        &findings_body,
        Phase::FinalReview,
        now,
    )?;
    task_group.push(MemoryEntry {
        scope: MemoryScope::TaskGroup,
        section: Section::Findings,
        body: findings_body,
        updated_at: now,
        author_phase: Phase::FinalReview,
        entry_id: id,
    });
    let id = store.update_memory(
        &MemoryScope::TaskGroup,
        Section::Suggestions,
        &group_text,
        Phase::FinalReview,
        now,
    )?;
    task_group.push(MemoryEntry {
        scope: MemoryScope::TaskGroup,
        section: Section::Suggestions,
        body: group_text,
        updated_at: now,
        author_phase: Phase::FinalReview,
        entry_id: id,
    });
    let id = store.update_memory(
        &MemoryScope::Global,
        Section::Suggestions,
        &global_text,
        Phase::FinalReview,
        now,
    )?;
    global.push(MemoryEntry {
        scope: MemoryScope::Global,
        section: Section::Suggestions,
        body: global_text,
        updated_at: now,
        author_phase: Phase::FinalReview,
        entry_id: id,
    });

    Ok(FinalizeOutput {
        task_group,
        global,
        skipped,
    })
}

/// Pull `{"task_group": ..., "global": ...}` out of a distillation reply.
fn extract_distillation(content: &str) -> Option<(String, String)> {
    let start = content.find('{')?;
    let end = content.rfind('}')?;
    let value: serde_json::Value = serde_json::from_str(&content[start..=end]).ok()?;
    let group = value.get("task_group")?.as_str()?.to_string();
    let global = value.get("global")?.as_str()?.to_string();
    Some((group, global))
}

/// Deterministic rendering of memory entries for prompt embedding.
pub fn render_entries(entries: &[MemoryEntry]) -> String {
    if entries.is_empty() {
        return "(empty)".to_string();
    }
    let mut out = String::new();
    for entry in entries {
        out.push_str(&format!(
            "[{} #{} by {} at {}]\n{}\n",
            entry.section.as_str(),
            entry.entry_id,
            entry.author_phase.as_str(),
            entry.updated_at,
            entry.body
        ));
    }
    out
}
