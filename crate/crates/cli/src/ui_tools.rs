//! Model-backed helper tools: task-maker, skill-maker, ask.
//!
//! These accept natural language and sit on top of the same gateway as the
//! engine; every call is audited under the `ui-tool` phase. Their outputs
//! are validated deterministically before anything is written.

use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use scifi_core::clock::RunClock;
use scifi_core::gateway::types::{
    CallContext, CompletionRequest, Message, RoleClass, SamplingParams,
};
use scifi_core::gateway::{Gateway, GatewayError};
use scifi_core::memory::{EventFilter, MemoryScope, MemoryStore};
use scifi_core::sam::{parse_sam, render_source, validate as validate_doc, SamDocument};
use scifi_core::skills::make_skill;
use scifi_core::store::{Phase, RunId, StorePaths};

use crate::setup::Globals;

/// Grounding context for `ask`, embedded at build time so the binary is
/// self-contained.
const SYSTEM_NOTES: &str = include_str!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../docs/system-notes.md"
));

/// Bounded repairs for task-maker output that fails validation.
const MAX_REPAIRS: u32 = 2;

const TASK_MAKER_SYSTEM: &str = "You are the task maker. Turn the user's request into a complete \
task file in the documented format. Requirements: an optional fenced meta block first; one root \
heading; a To-do section with the concrete action; an Expectation section with a criterion that \
can be verified mechanically after the fact; put the user's own words into the Context section. \
Decompose into sub-task headings only when there are natural checkpoints. Answer with the task \
file content and nothing else.\n\nFormat reference:\n";

const ASK_SYSTEM: &str = "You answer questions about the task orchestrator for its users: how to \
write task files, grant resources, configure models, and read the stores. Ground every answer in \
the system notes below; when the answer is a metadata key or command flag, name it exactly.\n\n";

fn ui_gateway(globals: &Globals, scripted: Option<&Path>) -> Result<(Arc<Gateway>, RunId)> {
    let (gateway, _) = globals.build_gateway(RunClock::live(), scripted)?;
    let run_id = globals.attach_ui_audit(&gateway)?;
    Ok((gateway, run_id))
}

fn complete_ui(
    gateway: &Gateway,
    run_id: &RunId,
    messages: Vec<Message>,
) -> Result<Result<String, GatewayError>> {
    let request = CompletionRequest {
        role_class: RoleClass::Control,
        messages,
        tools: vec![],
        params: SamplingParams::default(),
    };
    let ctx = CallContext::new(run_id.clone(), Phase::UiTool);
    match gateway.complete(&ctx, RoleClass::Control, gateway.control_rank(), None, &request) {
        Ok(done) => Ok(Ok(done.response.message.content)),
        Err(e @ (GatewayError::NoUsableModel { .. } | GatewayError::AllProvidersFailed { .. })) => {
            Ok(Err(e))
        }
        Err(e) => Err(anyhow::anyhow!("gateway: {e}")),
    }
}

/// Strip a plain wrapping code fence, leaving a leading ```meta fence (real
/// content) alone.
fn strip_outer_fence(text: &str) -> String {
    let trimmed = text.trim();
    let mut lines: Vec<&str> = trimmed.lines().collect();
    if lines.len() >= 2 {
        let first = lines[0].trim();
        if (first == "```" || first == "```markdown" || first == "```md")
            && lines.last().map(|l| l.trim()) == Some("```")
        {
            lines.remove(0);
            lines.pop();
            return lines.join("\n");
        }
    }
    trimmed.to_string()
}

pub fn task_maker(
    globals: &Globals,
    text: &str,
    output: Option<&Path>,
    scripted: Option<&Path>,
) -> Result<u8> {
    if text.trim().is_empty() {
        eprintln!("usage: task-maker needs a non-empty request");
        return Ok(1);
    }
    let library = globals.load_skills()?;
    let (gateway, run_id) = ui_gateway(globals, scripted)?;

    let mut skill_hints = String::new();
    if !library.is_empty() {
        skill_hints.push_str("\nAvailable skills (add matching ones to the `skills` metadata key):\n");
        for skill in library.skills() {
            skill_hints.push_str(&format!(
                "- {}: {} (triggers: {})\n",
                skill.name,
                skill.description,
                skill.triggers.join(", ")
            ));
        }
    }
    let system = format!("{TASK_MAKER_SYSTEM}{SYSTEM_NOTES}{skill_hints}");
    let mut messages = vec![Message::system(system), Message::user(text.to_string())];

    let mut last_problem = String::new();
    for _attempt in 0..=MAX_REPAIRS {
        let content = match complete_ui(&gateway, &run_id, messages.clone())? {
            Ok(content) => content,
            Err(e) => {
                eprintln!("task-maker: {e}");
                return Ok(5);
            }
        };
        let candidate = strip_outer_fence(&content);
        match parse_sam(&candidate, Path::new("<task-maker>")) {
            Ok(doc) => {
                let violations = validate_doc(&doc);
                if violations.is_empty() {
                    let doc = finalize_generated_task(doc, text, &library);
                    let rendered = render_source(&doc);
                    match output {
                        Some(path) => {
                            std::fs::write(path, &rendered)
                                .with_context(|| format!("writing {}", path.display()))?;
                            eprintln!("wrote {}", path.display());
                        }
                        None => print!("{rendered}"),
                    }
                    return Ok(0);
                }
                last_problem = violations
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("; ");
            }
            Err(e) => last_problem = e.to_string(),
        }
        messages.push(Message::assistant(content, vec![]));
        messages.push(Message::user(format!(
            "That task file is invalid: {last_problem}. Answer with the corrected file only."
        )));
    }
    eprintln!("task-maker: unrepairable output after {MAX_REPAIRS} repairs: {last_problem}");
    Ok(1)
}

/// Deterministic post-pass over a model-generated task: the user's words
/// must survive in the root context, and trigger-matched skills must be
/// requested in metadata.
fn finalize_generated_task(
    mut doc: SamDocument,
    user_text: &str,
    library: &scifi_core::skills::SkillLibrary,
) -> SamDocument {
    let has_user_text = doc
        .root
        .context
        .as_deref()
        .map(|c| c.contains(user_text.trim()))
        .unwrap_or(false);
    if !has_user_text {
        let mut context = format!("User request: {}", user_text.trim());
        if let Some(existing) = &doc.root.context {
            context.push_str("\n\n");
            context.push_str(existing);
        }
        doc.root.context = Some(context);
    }
    for skill in library.suggest(user_text) {
        if !doc.metadata.skills.iter().any(|s| s == &skill.name) {
            doc.metadata.skills.push(skill.name.clone());
        }
    }
    doc
}

pub fn skill_maker(
    globals: &Globals,
    task_file: &Path,
    run_id: &str,
    scripted: Option<&Path>,
) -> Result<u8> {
    let task_folder = task_file
        .canonicalize()
        .ok()
        .and_then(|p| p.parent().map(Path::to_path_buf))
        .context("task file not found")?;
    let store = StorePaths::for_task(&task_folder, &globals.store_root);
    let source_run = RunId::new(run_id);
    let memory_store = MemoryStore::new(store);
    let memory = memory_store
        .read_memory(&MemoryScope::Task(source_run.clone()))
        .map_err(|e| anyhow::anyhow!("memory: {e}"))?;
    let history = memory_store
        .read_history(&source_run, &EventFilter::default())
        .map_err(|e| anyhow::anyhow!("history: {e}"))?;

    // The new skill lands in the library directory; make sure it exists.
    std::fs::create_dir_all(&globals.skills_dir)
        .with_context(|| format!("creating {}", globals.skills_dir.display()))?;
    let library = scifi_core::skills::load_library(&globals.skills_dir)
        .map_err(|e| anyhow::anyhow!("skill library: {e}"))?;

    let (gateway, ui_run) = ui_gateway(globals, scripted)?;
    match make_skill(&memory, &history, &library, &gateway, &ui_run) {
        Ok(skill) => {
            println!(
                "created skill {:?} at {}",
                skill.name,
                globals.skills_dir.join(format!("{}.md", skill.name)).display()
            );
            Ok(0)
        }
        Err(scifi_core::skills::SkillError::Gateway(e)) => {
            eprintln!("skill-maker: {e}");
            Ok(5)
        }
        Err(e) => {
            eprintln!("skill-maker: {e}");
            Ok(1)
        }
    }
}

pub fn ask(
    globals: &Globals,
    question: &str,
    notes: Option<&Path>,
    scripted: Option<&Path>,
) -> Result<u8> {
    if question.trim().is_empty() {
        eprintln!("usage: ask needs a non-empty question");
        return Ok(1);
    }
    let (grounding, degraded) = match notes {
        None => (SYSTEM_NOTES.to_string(), false),
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => (text, false),
            Err(_) => (String::new(), true),
        },
    };
    let (gateway, run_id) = ui_gateway(globals, scripted)?;
    let system = if degraded {
        format!("{ASK_SYSTEM}(system notes unavailable; answer from general knowledge and say so)")
    } else {
        format!("{ASK_SYSTEM}{grounding}")
    };
    match complete_ui(
        &gateway,
        &run_id,
        vec![Message::system(system), Message::user(question.to_string())],
    )? {
        Ok(answer) => {
            if degraded {
                println!("(system notes unavailable; this answer is ungrounded)");
            }
            println!("{answer}");
            Ok(0)
        }
        Err(e) => {
            eprintln!("ask: {e}");
            Ok(5)
        }
    }
}
