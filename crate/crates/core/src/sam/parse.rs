//! Deterministic task-file parser.
//!
//! The parser works on byte offsets into the raw text, so every section body
//! it produces is a verbatim (trimmed) substring of the file. Headings are
//! ATX style (`#` through `######` followed by a space) and are only
//! recognized outside fenced code blocks. Relative to the SAM that is
//! currently open at level `L`:
//!
//! - a heading at level `L+1` titled `Context`, `To-do`, or `Expectation`
//!   (case-insensitive) opens that section;
//! - any other heading at level `L+1` opens a sub-SAM;
//! - a heading at level `L` or above closes the SAM;
//! - deeper headings are ordinary section content, so expectations may
//!   themselves contain Markdown headings.

use std::path::{Path, PathBuf};

use thiserror::Error;

use super::meta::{self, KvEntry, MetaSyntaxError};
use super::{
    content_digest, MountMode, MountSpec, NodeId, NodeStatus, SamDocument, SamNode, TaskMetadata,
    UnknownKey,
};

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("could not read task file {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("task file {path} is not valid UTF-8")]
    InvalidUtf8 { path: PathBuf },
    #[error("task file contains no SAM heading")]
    EmptyDocument,
    #[error("node {0} is missing its To-do section")]
    MissingTodo(NodeId),
    #[error("node {0} is missing its Expectation section")]
    MissingExpectation(NodeId),
    #[error("malformed metadata at line {line}: {reason}")]
    MalformedMetadata { line: usize, reason: String },
    #[error("line {line}: a second root-level heading is not allowed")]
    MultipleRoots { line: usize },
    #[error("node {node} declares section {section:?} twice (line {line})")]
    DuplicateSection {
        node: NodeId,
        section: &'static str,
        line: usize,
    },
}

impl From<MetaSyntaxError> for ParseError {
    fn from(e: MetaSyntaxError) -> Self {
        ParseError::MalformedMetadata {
            line: e.line,
            reason: e.reason,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SectionKind {
    Context,
    Todo,
    Expectation,
}

impl SectionKind {
    fn name(self) -> &'static str {
        match self {
            SectionKind::Context => "Context",
            SectionKind::Todo => "To-do",
            SectionKind::Expectation => "Expectation",
        }
    }

    fn from_title(title: &str) -> Option<Self> {
        let t = title.trim();
        if t.eq_ignore_ascii_case("context") {
            Some(SectionKind::Context)
        } else if t.eq_ignore_ascii_case("to-do") {
            Some(SectionKind::Todo)
        } else if t.eq_ignore_ascii_case("expectation") {
            Some(SectionKind::Expectation)
        } else {
            None
        }
    }
}

/// Byte span of a section body within the raw text.
#[derive(Debug, Clone, Copy)]
struct Span {
    start: usize,
    end: usize,
}

struct NodeBuilder {
    id: NodeId,
    title: String,
    level: usize,
    context: Option<Span>,
    todo: Option<Span>,
    expectation: Option<Span>,
    children: Vec<SamNode>,
    open_section: Option<(SectionKind, Span)>,
}

impl NodeBuilder {
    fn new(id: NodeId, title: String, level: usize) -> Self {
        NodeBuilder {
            id,
            title,
            level,
            context: None,
            todo: None,
            expectation: None,
            children: Vec::new(),
            open_section: None,
        }
    }

    fn close_section(&mut self) {
        if let Some((kind, span)) = self.open_section.take() {
            let slot = match kind {
                SectionKind::Context => &mut self.context,
                SectionKind::Todo => &mut self.todo,
                SectionKind::Expectation => &mut self.expectation,
            };
            *slot = Some(span);
        }
    }

    fn open_section(
        &mut self,
        kind: SectionKind,
        start: usize,
        line: usize,
    ) -> Result<(), ParseError> {
        self.close_section();
        let taken = match kind {
            SectionKind::Context => self.context.is_some(),
            SectionKind::Todo => self.todo.is_some(),
            SectionKind::Expectation => self.expectation.is_some(),
        };
        if taken {
            return Err(ParseError::DuplicateSection {
                node: self.id.clone(),
                section: kind.name(),
                line,
            });
        }
        self.open_section = Some((kind, Span { start, end: start }));
        Ok(())
    }

    fn extend_section(&mut self, end: usize) {
        if let Some((_, span)) = self.open_section.as_mut() {
            span.end = end;
        }
    }

    fn finish(mut self, raw: &str) -> Result<SamNode, ParseError> {
        self.close_section();
        let text_of = |span: Option<Span>| span.map(|s| raw[s.start..s.end].trim().to_string());
        let todo = text_of(self.todo).filter(|t| !t.is_empty());
        let expectation = text_of(self.expectation).filter(|t| !t.is_empty());
        let context = text_of(self.context).filter(|t| !t.is_empty());
        let Some(todo) = todo else {
            return Err(ParseError::MissingTodo(self.id));
        };
        let Some(expectation) = expectation else {
            return Err(ParseError::MissingExpectation(self.id));
        };
        Ok(SamNode {
            id: self.id,
            title: self.title,
            context,
            todo,
            expectation,
            children: self.children,
            status: NodeStatus::Pending,
        })
    }
}

/// Parse raw task-file text into a document. Pure: the same bytes always
/// yield the same document, and the digest pins the bytes for the run.
pub fn parse_sam(raw: &str, source_path: &Path) -> Result<SamDocument, ParseError> {
    let (entries, body_offset) = meta::split_meta_block(raw)?;
    let metadata = metadata_from_entries(entries)?;

    let line_base = raw[..body_offset].matches('\n').count();
    let mut stack: Vec<NodeBuilder> = Vec::new();
    let mut root: Option<SamNode> = None;
    let mut in_fence = false;

    let mut offset = body_offset;
    let mut line_no = line_base;
    for line in raw[body_offset..].split_inclusive('\n') {
        let end = offset + line.len();
        offset = end;
        line_no += 1;
        let text = line.trim_end_matches(['\n', '\r']);

        if text.trim_start().starts_with("```") {
            in_fence = !in_fence;
            if let Some(top) = stack.last_mut() {
                top.extend_section(end);
            }
            continue;
        }
        if in_fence {
            if let Some(top) = stack.last_mut() {
                top.extend_section(end);
            }
            continue;
        }

        let Some((level, title)) = parse_heading(text) else {
            if let Some(top) = stack.last_mut() {
                top.extend_section(end);
            }
            continue;
        };

        loop {
            let Some(top_level) = stack.last().map(|b| b.level) else {
                if root.is_some() {
                    return Err(ParseError::MultipleRoots { line: line_no });
                }
                stack.push(NodeBuilder::new(NodeId::root(), title.to_string(), level));
                break;
            };
            if level >= top_level + 2 {
                // Deeper than a direct subsection: plain content.
                let top = stack.last_mut().expect("stack non-empty");
                if top.open_section.is_none() {
                    // Stray heading between sections; ignored like other prose.
                } else {
                    top.extend_section(end);
                }
                break;
            }
            if level == top_level + 1 {
                if let Some(kind) = SectionKind::from_title(title) {
                    let top = stack.last_mut().expect("stack non-empty");
                    top.open_section(kind, end, line_no)?;
                } else {
                    // Earlier siblings were popped and attached before this
                    // heading could reach the parent, so children.len() is
                    // the count of finished siblings.
                    let top = stack.last_mut().expect("stack non-empty");
                    top.close_section();
                    let id = top.id.child(top.children.len() + 1);
                    stack.push(NodeBuilder::new(id, title.to_string(), level));
                }
                break;
            }
            // level <= top_level: the current SAM is finished.
            let done = stack.pop().expect("stack non-empty").finish(raw)?;
            match stack.last_mut() {
                Some(parent) => parent.children.push(done),
                None => root = Some(done),
            }
        }
    }

    while let Some(builder) = stack.pop() {
        let done = builder.finish(raw)?;
        match stack.last_mut() {
            Some(parent) => parent.children.push(done),
            None => root = Some(done),
        }
    }

    let Some(root) = root else {
        return Err(ParseError::EmptyDocument);
    };

    Ok(SamDocument {
        root,
        metadata,
        source_digest: content_digest(raw.as_bytes()),
        source_path: source_path.to_path_buf(),
    })
}

fn parse_heading(text: &str) -> Option<(usize, &str)> {
    let hashes = text.bytes().take_while(|&b| b == b'#').count();
    if hashes == 0 || hashes > 6 {
        return None;
    }
    let rest = &text[hashes..];
    if !rest.starts_with(' ') {
        return None;
    }
    let title = rest.trim();
    if title.is_empty() {
        return None;
    }
    Some((hashes, title))
}

fn metadata_from_entries(entries: Vec<KvEntry>) -> Result<TaskMetadata, ParseError> {
    let mut md = TaskMetadata::default();
    let mut seen: Vec<&'static str> = Vec::new();
    let mut seen_scalar = |name: &'static str, line: usize| -> Result<(), ParseError> {
        if seen.contains(&name) {
            return Err(ParseError::MalformedMetadata {
                line,
                reason: format!("duplicate key {name:?}"),
            });
        }
        seen.push(name);
        Ok(())
    };

    for entry in &entries {
        match entry.key.as_str() {
            "wall_time_limit" => {
                seen_scalar("wall_time_limit", entry.line)?;
                md.wall_time_limit_secs = meta::parse_positive_u64(entry)?;
            }
            "max_iterations" => {
                seen_scalar("max_iterations", entry.line)?;
                let n = meta::parse_positive_u64(entry)?;
                md.max_iterations =
                    u32::try_from(n).map_err(|_| ParseError::MalformedMetadata {
                        line: entry.line,
                        reason: format!("max_iterations {n} is out of range"),
                    })?;
            }
            "gpu" => {
                seen_scalar("gpu", entry.line)?;
                md.gpu = meta::parse_bool(entry)?;
            }
            "network" => {
                seen_scalar("network", entry.line)?;
                md.network = meta::parse_bool(entry)?;
            }
            "job_system" => {
                seen_scalar("job_system", entry.line)?;
                md.job_system = meta::parse_bool(entry)?;
            }
            "difficulty_hint" => {
                seen_scalar("difficulty_hint", entry.line)?;
                let n = meta::parse_positive_u64(entry)?;
                md.difficulty_hint =
                    Some(u32::try_from(n).map_err(|_| ParseError::MalformedMetadata {
                        line: entry.line,
                        reason: format!("difficulty_hint {n} is out of range"),
                    })?);
            }
            "model_preference" => {
                seen_scalar("model_preference", entry.line)?;
                md.model_preference = Some(entry.value.clone());
            }
            "skills" => {
                md.skills.extend(meta::parse_list(&entry.value));
            }
            "mounts" => {
                for item in meta::parse_list(&entry.value) {
                    md.mounts.push(parse_mount(&item, entry.line)?);
                }
            }
            _ => md.unknown_keys.push(UnknownKey {
                key: entry.key.clone(),
                value: entry.value.clone(),
                line: entry.line,
            }),
        }
    }
    Ok(md)
}

fn parse_mount(item: &str, line: usize) -> Result<MountSpec, ParseError> {
    let parts: Vec<&str> = item.split(':').collect();
    let [host, guest, mode] = parts.as_slice() else {
        return Err(ParseError::MalformedMetadata {
            line,
            reason: format!("mount {item:?} must be host:guest:ro|rw"),
        });
    };
    let mode = match *mode {
        "ro" => MountMode::ReadOnly,
        "rw" => MountMode::ReadWrite,
        other => {
            return Err(ParseError::MalformedMetadata {
                line,
                reason: format!("mount mode {other:?} must be ro or rw"),
            })
        }
    };
    Ok(MountSpec {
        host_path: PathBuf::from(host),
        guest_path: PathBuf::from(guest),
        mode,
    })
}
