//! Lint layer over parsed documents.
//!
//! Violations are data, not errors: a document that parsed can still break
//! rules that matter at run time. The full rule table lives in the format
//! reference (`docs/system-notes.md`), one fixture per rule in the tests.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use super::{NodeId, SamDocument};

/// One broken rule. `code()` values are stable and documented.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    /// Two nodes share an id (cannot happen for parsed docs; checked anyway
    /// for documents assembled programmatically).
    DuplicateId { id: NodeId },
    /// To-do text is empty after whitespace stripping.
    EmptyTodo { id: NodeId },
    /// Expectation text is empty after whitespace stripping.
    EmptyExpectation { id: NodeId },
    /// Metadata key the grammar does not know (typo guard).
    UnknownMetadataKey { key: String, line: usize },
    /// Mount host path is not absolute.
    RelativeMountHostPath { path: String },
    /// Mount guest path is not absolute.
    RelativeMountGuestPath { path: String },
    /// Two mounts target the same guest path.
    DuplicateMountGuestPath { guest: String },
    /// A metadata-selected skill name is empty after trimming.
    EmptySkillName,
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::DuplicateId { .. } => "duplicate-id",
            Violation::EmptyTodo { .. } => "empty-todo",
            Violation::EmptyExpectation { .. } => "empty-expectation",
            Violation::UnknownMetadataKey { .. } => "unknown-metadata-key",
            Violation::RelativeMountHostPath { .. } => "relative-mount-host-path",
            Violation::RelativeMountGuestPath { .. } => "relative-mount-guest-path",
            Violation::DuplicateMountGuestPath { .. } => "duplicate-mount-guest-path",
            Violation::EmptySkillName => "empty-skill-name",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId { id } => write!(f, "duplicate node id {id}"),
            Violation::EmptyTodo { id } => write!(f, "node {id} has an empty To-do"),
            Violation::EmptyExpectation { id } => {
                write!(f, "node {id} has an empty Expectation")
            }
            Violation::UnknownMetadataKey { key, line } => {
                write!(f, "unknown metadata key {key:?} at line {line}")
            }
            Violation::RelativeMountHostPath { path } => {
                write!(f, "mount host path {path:?} is not absolute")
            }
            Violation::RelativeMountGuestPath { path } => {
                write!(f, "mount guest path {path:?} is not absolute")
            }
            Violation::DuplicateMountGuestPath { guest } => {
                write!(f, "multiple mounts target guest path {guest:?}")
            }
            Violation::EmptySkillName => write!(f, "skills list contains an empty name"),
        }
    }
}

/// Check every rule; an empty list means the document is valid.
pub fn validate(doc: &SamDocument) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut seen_ids = BTreeSet::new();
    for node in doc.nodes() {
        if !seen_ids.insert(node.id.clone()) {
            out.push(Violation::DuplicateId {
                id: node.id.clone(),
            });
        }
        if node.todo.trim().is_empty() {
            out.push(Violation::EmptyTodo {
                id: node.id.clone(),
            });
        }
        if node.expectation.trim().is_empty() {
            out.push(Violation::EmptyExpectation {
                id: node.id.clone(),
            });
        }
    }

    for unknown in &doc.metadata.unknown_keys {
        out.push(Violation::UnknownMetadataKey {
            key: unknown.key.clone(),
            line: unknown.line,
        });
    }

    let mut guests = BTreeSet::new();
    for mount in &doc.metadata.mounts {
        if !mount.host_path.is_absolute() {
            out.push(Violation::RelativeMountHostPath {
                path: mount.host_path.display().to_string(),
            });
        }
        if !mount.guest_path.is_absolute() {
            out.push(Violation::RelativeMountGuestPath {
                path: mount.guest_path.display().to_string(),
            });
        }
        if !guests.insert(mount.guest_path.clone()) {
            out.push(Violation::DuplicateMountGuestPath {
                guest: mount.guest_path.display().to_string(),
            });
        }
    }

    if doc.metadata.skills.iter().any(|s| s.trim().is_empty()) {
        out.push(Violation::EmptySkillName);
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sam::parse_sam;
    use std::path::Path;

    fn parse(raw: &str) -> SamDocument {
        parse_sam(raw, Path::new("/tmp/task.md")).unwrap()
    }

    #[test]
    fn well_formed_document_has_no_violations() {
        let doc = parse("# T\n## To-do\nx\n## Expectation\ny\n");
        assert!(validate(&doc).is_empty());
    }

    #[test]
    fn unknown_key_typo_is_flagged() {
        let doc = parse("```meta\ngup: true\n```\n# T\n## To-do\nx\n## Expectation\ny\n");
        let violations = validate(&doc);
        assert_eq!(violations.len(), 1);
        assert!(matches!(
            &violations[0],
            Violation::UnknownMetadataKey { key, .. } if key == "gup"
        ));
    }

    #[test]
    fn relative_mount_paths_are_flagged() {
        let doc = parse(
            "```meta\nmounts: data/in:/in:ro, /out:out:rw\n```\n# T\n## To-do\nx\n## Expectation\ny\n",
        );
        let codes: Vec<_> = validate(&doc).iter().map(|v| v.code()).collect();
        assert!(codes.contains(&"relative-mount-host-path"));
        assert!(codes.contains(&"relative-mount-guest-path"));
    }

    #[test]
    fn duplicate_guest_path_is_flagged() {
        let doc = parse(
            "```meta\nmounts: /a:/in:ro, /b:/in:ro\n```\n# T\n## To-do\nx\n## Expectation\ny\n",
        );
        let codes: Vec<_> = validate(&doc).iter().map(|v| v.code()).collect();
        assert_eq!(codes, vec!["duplicate-mount-guest-path"]);
    }

    #[test]
    fn duplicate_id_detected_on_hand_built_tree() {
        let mut doc = parse("# T\n## To-do\nx\n## Expectation\ny\n## S\n### To-do\na\n### Expectation\nb\n");
        doc.root.children[0].id = NodeId::root();
        let codes: Vec<_> = validate(&doc).iter().map(|v| v.code()).collect();
        assert!(codes.contains(&"duplicate-id"));
    }
}
