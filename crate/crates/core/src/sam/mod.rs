//! Self-Assessed Module (SAM) task descriptions.
//!
//! A task file is plain Markdown. The first heading opens the root SAM; its
//! body holds the reserved sections `Context` (optional), `To-do`, and
//! `Expectation` one heading level deeper. Any non-reserved heading one level
//! below a SAM opens a sub-SAM with the same three-part structure, nested
//! arbitrarily deep. An optional fenced ```` ```meta ```` block of
//! `key: value` lines at the top of the file declares resource metadata.
//!
//! Parsing is pure and deterministic: no model is ever involved, the same
//! bytes always produce the same document, and the expectation text of every
//! node is a verbatim substring of the file. The file itself is treated as
//! read-only for the whole run; [`assert_unmodified`] re-hashes it so the
//! engine can detect tampering before trusting any expectation.

mod meta;
mod parse;
mod render;
mod validate;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use parse::{parse_sam, ParseError};
pub use render::{render_for_agent, render_source};
pub use validate::{validate, Violation};

/// A `key: value` line from a fenced meta block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Syntax error inside a meta block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaError {
    pub line: usize,
    pub reason: String,
}

/// Extract the leading fenced `meta` block of any file using this grammar
/// (task files and skill files share it). Returns the entries plus the byte
/// offset where the body starts.
pub fn meta_entries(raw: &str) -> Result<(Vec<MetaEntry>, usize), MetaError> {
    let (entries, offset) = meta::split_meta_block(raw).map_err(|e| MetaError {
        line: e.line,
        reason: e.reason,
    })?;
    Ok((
        entries
            .into_iter()
            .map(|e| MetaEntry {
                key: e.key,
                value: e.value,
                line: e.line,
            })
            .collect(),
        offset,
    ))
}

/// Split a comma-separated meta value into trimmed, non-empty items.
pub fn meta_list(value: &str) -> Vec<String> {
    meta::parse_list(value)
}

/// Path-like node identifier: `root`, `root/1`, `root/1/2`, ... derived from
/// document order, never from titles.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn root() -> Self {
        NodeId("root".to_string())
    }

    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    /// Id of this node's `index`-th child (1-based).
    pub fn child(&self, index: usize) -> Self {
        NodeId(format!("{}/{index}", self.0))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Lifecycle of a node within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NodeStatus {
    #[default]
    #[serde(rename = "pending")]
    Pending,
    #[serde(rename = "in-progress")]
    InProgress,
    #[serde(rename = "done")]
    Done,
}

impl NodeStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeStatus::Pending => "pending",
            NodeStatus::InProgress => "in-progress",
            NodeStatus::Done => "done",
        }
    }
}

/// Mount access mode. Exactly `ro` or `rw`, nothing else parses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MountMode {
    #[serde(rename = "ro")]
    ReadOnly,
    #[serde(rename = "rw")]
    ReadWrite,
}

impl MountMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MountMode::ReadOnly => "ro",
            MountMode::ReadWrite => "rw",
        }
    }
}

/// One declared bind mount, `host:guest:ro|rw` in the meta block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MountSpec {
    pub host_path: PathBuf,
    pub guest_path: PathBuf,
    pub mode: MountMode,
}

/// A metadata key the grammar does not know. Kept for the lint layer so a
/// typo surfaces as a violation instead of being silently dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnknownKey {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Deterministically parsed resource metadata. Absent keys take the
/// documented defaults; parsing never involves a model call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMetadata {
    /// Hard wall-time limit for a run, in seconds. Default 3600.
    pub wall_time_limit_secs: u64,
    /// Hard iteration ceiling for a run. Default 200.
    pub max_iterations: u32,
    /// GPU passthrough requested. Default false.
    pub gpu: bool,
    /// Network access inside the sandbox. Default true.
    pub network: bool,
    /// Permission to talk to an external job system. Default false.
    pub job_system: bool,
    /// Extra bind mounts beyond the task folder. Default empty.
    pub mounts: Vec<MountSpec>,
    /// Names of skills to inject into the work agent's context. Default empty.
    pub skills: Vec<String>,
    /// Ordinal difficulty hint; seeds the initial work-model rank.
    pub difficulty_hint: Option<u32>,
    /// Preferred model name; wins rotation ties when usable.
    pub model_preference: Option<String>,
    /// Keys the grammar did not recognize (lint fodder, not errors).
    pub unknown_keys: Vec<UnknownKey>,
}

impl Default for TaskMetadata {
    fn default() -> Self {
        TaskMetadata {
            wall_time_limit_secs: 3600,
            max_iterations: 200,
            gpu: false,
            network: true,
            job_system: false,
            mounts: Vec::new(),
            skills: Vec::new(),
            difficulty_hint: None,
            model_preference: None,
            unknown_keys: Vec::new(),
        }
    }
}

/// One node of the task tree: context (optional), to-do, expectation, plus
/// ordered children following the same structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamNode {
    pub id: NodeId,
    pub title: String,
    pub context: Option<String>,
    pub todo: String,
    pub expectation: String,
    pub children: Vec<SamNode>,
    pub status: NodeStatus,
}

impl SamNode {
    /// Depth-first (document order) iteration over this subtree.
    pub fn walk(&self) -> Vec<&SamNode> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(node) = stack.pop() {
            out.push(node);
            for child in node.children.iter().rev() {
                stack.push(child);
            }
        }
        out
    }
}

/// A parsed task file: the node tree, its metadata, and the content digest
/// that pins the file for the rest of the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamDocument {
    pub root: SamNode,
    pub metadata: TaskMetadata,
    /// SHA-256 of the raw file bytes, hex-encoded.
    pub source_digest: String,
    pub source_path: PathBuf,
}

impl SamDocument {
    /// Look up a node by id anywhere in the tree.
    pub fn node(&self, id: &NodeId) -> Option<&SamNode> {
        self.root.walk().into_iter().find(|n| &n.id == id)
    }

    /// All nodes in document order.
    pub fn nodes(&self) -> Vec<&SamNode> {
        self.root.walk()
    }

    /// A copy of this document with statuses overlaid from the run state.
    /// The parsed document itself stays immutable.
    pub fn with_statuses(&self, statuses: &std::collections::BTreeMap<NodeId, NodeStatus>) -> Self {
        fn apply(
            node: &SamNode,
            statuses: &std::collections::BTreeMap<NodeId, NodeStatus>,
        ) -> SamNode {
            SamNode {
                id: node.id.clone(),
                title: node.title.clone(),
                context: node.context.clone(),
                todo: node.todo.clone(),
                expectation: node.expectation.clone(),
                children: node.children.iter().map(|c| apply(c, statuses)).collect(),
                status: statuses.get(&node.id).copied().unwrap_or(node.status),
            }
        }
        SamDocument {
            root: apply(&self.root, statuses),
            metadata: self.metadata.clone(),
            source_digest: self.source_digest.clone(),
            source_path: self.source_path.clone(),
        }
    }
}

/// Hex SHA-256 of raw task-file bytes.
pub fn content_digest(raw: &[u8]) -> String {
    hex::encode(Sha256::digest(raw))
}

/// Lookup failure for node-addressed operations.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown node id: {0}")]
pub struct UnknownNode(pub NodeId);

/// Return the verbatim expectation text of `node_id`, straight from the
/// parsed document. This is the only expectation source the review phase may
/// use; it can never come from model output.
pub fn extract_expectation<'d>(doc: &'d SamDocument, node_id: &NodeId) -> Result<&'d str, UnknownNode> {
    doc.node(node_id)
        .map(|n| n.expectation.as_str())
        .ok_or_else(|| UnknownNode(node_id.clone()))
}

/// Task-file integrity failures.
#[derive(Debug, Error)]
pub enum IntegrityError {
    #[error("task file was modified during the run (expected {expected}, found {actual})")]
    TamperDetected { expected: String, actual: String },
    #[error("task file missing: {0}")]
    FileMissing(PathBuf),
    #[error("could not re-read task file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Re-hash the on-disk task file and compare against the digest captured at
/// parse time. The engine calls this before every review phase.
pub fn assert_unmodified(doc: &SamDocument) -> Result<(), IntegrityError> {
    let raw = match std::fs::read(&doc.source_path) {
        Ok(raw) => raw,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(IntegrityError::FileMissing(doc.source_path.clone()))
        }
        Err(e) => {
            return Err(IntegrityError::Io {
                path: doc.source_path.clone(),
                source: e,
            })
        }
    };
    let actual = content_digest(&raw);
    if actual != doc.source_digest {
        return Err(IntegrityError::TamperDetected {
            expected: doc.source_digest.clone(),
            actual,
        });
    }
    Ok(())
}

/// Parse a task file from disk.
pub fn parse_sam_file(path: &Path) -> Result<SamDocument, ParseError> {
    let raw = std::fs::read(path).map_err(|e| ParseError::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let text = String::from_utf8(raw).map_err(|_| ParseError::InvalidUtf8 {
        path: path.to_path_buf(),
    })?;
    parse_sam(&text, path)
}
