//! Canonical textual renderings of parsed documents.
//!
//! [`render_for_agent`] produces the fixed-order block that goes into agent
//! prompts; [`render_source`] regenerates a complete task file from a parsed
//! document (used by the task maker and the round-trip tests).

use std::fmt::Write as _;

use super::{NodeId, SamDocument, SamNode, UnknownNode};

/// Render one node for prompt embedding: title line, labeled sections in
/// fixed order, and optionally the child list with statuses. Stable across
/// runs for identical documents.
pub fn render_for_agent(
    doc: &SamDocument,
    node_id: &NodeId,
    include_children: bool,
) -> Result<String, UnknownNode> {
    let node = doc.node(node_id).ok_or_else(|| UnknownNode(node_id.clone()))?;
    let mut out = String::new();
    let _ = writeln!(out, "SAM {} [{}]: {}", node.id, node.status.as_str(), node.title);
    if let Some(context) = &node.context {
        let _ = writeln!(out, "\nContext:\n{context}");
    }
    let _ = writeln!(out, "\nTo-do:\n{}", node.todo);
    let _ = writeln!(out, "\nExpectation:\n{}", node.expectation);
    if include_children && !node.children.is_empty() {
        let _ = writeln!(out, "\nSub-tasks:");
        for (i, child) in node.children.iter().enumerate() {
            let _ = writeln!(
                out,
                "{}. {} [{}]: {}",
                i + 1,
                child.id,
                child.status.as_str(),
                child.title
            );
        }
    }
    Ok(out)
}

/// Regenerate a full task file. Parsing the result yields a structurally
/// identical document (ids, texts, metadata values).
pub fn render_source(doc: &SamDocument) -> String {
    let mut out = String::new();
    let md = &doc.metadata;
    out.push_str("```meta\n");
    let _ = writeln!(out, "wall_time_limit: {}", md.wall_time_limit_secs);
    let _ = writeln!(out, "max_iterations: {}", md.max_iterations);
    let _ = writeln!(out, "gpu: {}", md.gpu);
    let _ = writeln!(out, "network: {}", md.network);
    let _ = writeln!(out, "job_system: {}", md.job_system);
    if !md.mounts.is_empty() {
        let mounts: Vec<String> = md
            .mounts
            .iter()
            .map(|m| {
                format!(
                    "{}:{}:{}",
                    m.host_path.display(),
                    m.guest_path.display(),
                    m.mode.as_str()
                )
            })
            .collect();
        let _ = writeln!(out, "mounts: {}", mounts.join(", "));
    }
    if !md.skills.is_empty() {
        let _ = writeln!(out, "skills: {}", md.skills.join(", "));
    }
    if let Some(hint) = md.difficulty_hint {
        let _ = writeln!(out, "difficulty_hint: {hint}");
    }
    if let Some(pref) = &md.model_preference {
        let _ = writeln!(out, "model_preference: {pref}");
    }
    for unknown in &md.unknown_keys {
        let _ = writeln!(out, "{}: {}", unknown.key, unknown.value);
    }
    out.push_str("```\n");
    render_node_source(&mut out, &doc.root, 1);
    out
}

fn render_node_source(out: &mut String, node: &SamNode, level: usize) {
    let hashes = "#".repeat(level.min(6));
    let _ = writeln!(out, "\n{hashes} {}", node.title);
    let section = "#".repeat((level + 1).min(6));
    if let Some(context) = &node.context {
        let _ = writeln!(out, "\n{section} Context\n{context}");
    }
    let _ = writeln!(out, "\n{section} To-do\n{}", node.todo);
    let _ = writeln!(out, "\n{section} Expectation\n{}", node.expectation);
    for child in &node.children {
        render_node_source(out, child, level + 1);
    }
}
