//! Skill library: reusable blocks of contextual text.
//!
//! A skill is one Markdown file with the same fenced `meta` grammar as task
//! files (`name`, `description`, `triggers`, `permissions`) followed by the
//! body that gets injected verbatim into the work agent's context. Skills
//! are selected per task via the `skills` metadata key; the library never
//! injects anything silently at run time (trigger-based suggestion belongs
//! to the task maker).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::types::{CallContext, CompletionRequest, Message, RoleClass, SamplingParams};
use crate::gateway::{Gateway, GatewayError};
use crate::memory::{render_entries, HistoryEvent, MemoryEntry};
use crate::sam::TaskMetadata;
use crate::store::{Phase, RunId};

/// One skill.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skill {
    /// Unique slug within the library.
    pub name: String,
    pub description: String,
    /// Keyword hints the task maker matches against user text.
    pub triggers: Vec<String>,
    /// Metadata permission flags this skill presumes (e.g. `job_system`).
    pub required_permissions: Vec<String>,
    /// The contextual text injected into work prompts.
    pub body: String,
}

#[derive(Debug, Error)]
pub enum SkillError {
    #[error("library root does not exist: {0}")]
    RootMissing(PathBuf),
    #[error("duplicate skill name {name:?} (files {first} and {second})")]
    DuplicateSkill {
        name: String,
        first: String,
        second: String,
    },
    #[error("malformed skill file {file}: {reason}")]
    MalformedSkill { file: PathBuf, reason: String },
    #[error("unknown skill {0:?}")]
    UnknownSkill(String),
    #[error("skill validation failed: {0}")]
    ValidationFailed(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("skill io on {file}: {source}")]
    Io {
        file: PathBuf,
        source: std::io::Error,
    },
}

/// An in-memory library, keyed by skill name.
#[derive(Debug, Clone, Default)]
pub struct SkillLibrary {
    skills: BTreeMap<String, Skill>,
    root: Option<PathBuf>,
}

impl SkillLibrary {
    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Skill> {
        self.skills.get(name)
    }

    pub fn skills(&self) -> impl Iterator<Item = &Skill> {
        self.skills.values()
    }

    /// Skills whose triggers appear (case-insensitively) in `text`.
    pub fn suggest(&self, text: &str) -> Vec<&Skill> {
        let lowered = text.to_lowercase();
        self.skills
            .values()
            .filter(|s| {
                s.triggers
                    .iter()
                    .any(|t| !t.is_empty() && lowered.contains(&t.to_lowercase()))
            })
            .collect()
    }
}

/// Parse one skill file.
pub fn parse_skill(raw: &str, file: &Path) -> Result<Skill, SkillError> {
    let malformed = |reason: String| SkillError::MalformedSkill {
        file: file.to_path_buf(),
        reason,
    };
    let (entries, body_offset) = crate::sam::meta_entries(raw)
        .map_err(|e| malformed(format!("line {}: {}", e.line, e.reason)))?;

    let mut name = None;
    let mut description = String::new();
    let mut triggers = Vec::new();
    let mut permissions = Vec::new();
    for entry in &entries {
        match entry.key.as_str() {
            "name" => name = Some(entry.value.clone()),
            "description" => description = entry.value.clone(),
            "triggers" => triggers.extend(crate::sam::meta_list(&entry.value)),
            "permissions" => permissions.extend(crate::sam::meta_list(&entry.value)),
            other => return Err(malformed(format!("unknown skill key {other:?}"))),
        }
    }
    let name = name.ok_or_else(|| malformed("missing name".to_string()))?;
    let body = raw[body_offset..].trim().to_string();
    if body.is_empty() {
        return Err(malformed("empty body".to_string()));
    }
    Ok(Skill {
        name,
        description,
        triggers,
        required_permissions: permissions,
        body,
    })
}

/// Render a skill back to its file form.
pub fn render_skill(skill: &Skill) -> String {
    let mut out = String::from("```meta\n");
    out.push_str(&format!("name: {}\n", skill.name));
    if !skill.description.is_empty() {
        out.push_str(&format!("description: {}\n", skill.description));
    }
    if !skill.triggers.is_empty() {
        out.push_str(&format!("triggers: {}\n", skill.triggers.join(", ")));
    }
    if !skill.required_permissions.is_empty() {
        out.push_str(&format!(
            "permissions: {}\n",
            skill.required_permissions.join(", ")
        ));
    }
    out.push_str("```\n\n");
    out.push_str(&skill.body);
    out.push('\n');
    out
}

/// Load every `*.md` under the root (sorted by filename). Duplicate names
/// and malformed files are loud errors, not skips.
pub fn load_library(root: &Path) -> Result<SkillLibrary, SkillError> {
    if !root.is_dir() {
        return Err(SkillError::RootMissing(root.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| SkillError::Io {
            file: root.to_path_buf(),
            source: e,
        })?
        .filter_map(|entry| entry.ok())
        .map(|entry| entry.path())
        .filter(|p| p.extension().is_some_and(|e| e == "md"))
        .collect();
    files.sort();

    let mut library = SkillLibrary {
        skills: BTreeMap::new(),
        root: Some(root.to_path_buf()),
    };
    let mut sources: BTreeMap<String, String> = BTreeMap::new();
    for file in files {
        let raw = std::fs::read_to_string(&file).map_err(|e| SkillError::Io {
            file: file.clone(),
            source: e,
        })?;
        let skill = parse_skill(&raw, &file)?;
        let file_name = file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if let Some(first) = sources.get(&skill.name) {
            return Err(SkillError::DuplicateSkill {
                name: skill.name,
                first: first.clone(),
                second: file_name,
            });
        }
        sources.insert(skill.name.clone(), file_name);
        library.skills.insert(skill.name.clone(), skill);
    }
    Ok(library)
}

/// Resolve the metadata-named skills, in metadata order. Unknown names are
/// errors; silent skips would change run behavior invisibly.
pub fn select_skills<'l>(
    metadata: &TaskMetadata,
    library: &'l SkillLibrary,
) -> Result<Vec<&'l Skill>, SkillError> {
    metadata
        .skills
        .iter()
        .map(|name| {
            library
                .get(name)
                .ok_or_else(|| SkillError::UnknownSkill(name.clone()))
        })
        .collect()
}

const DISTILL_PROMPT: &str = "You are the skill maker. Distill the task memory and history below \
into one reusable skill: a block of contextual text capturing the verified solution path or the \
domain knowledge that made this task succeed. Answer with a complete skill file: a fenced meta \
block (name, description, triggers) followed by the body. The name must be a new lowercase slug.";

/// Distill task memory and history into a new skill via a control model,
/// validate it, and write it into the library.
pub fn make_skill(
    memory: &[MemoryEntry],
    history: &[HistoryEvent],
    library: &SkillLibrary,
    gateway: &Gateway,
    run_id: &RunId,
) -> Result<Skill, SkillError> {
    if memory.is_empty() && history.is_empty() {
        return Err(SkillError::ValidationFailed("nothing to distill".to_string()));
    }
    let root = library
        .root
        .clone()
        .ok_or_else(|| SkillError::ValidationFailed("library has no root directory".to_string()))?;

    let mut prompt = String::from("Task memory:\n");
    prompt.push_str(&render_entries(memory));
    prompt.push_str("\nHistory:\n");
    if history.is_empty() {
        prompt.push_str("(empty)\n");
    }
    for event in history {
        prompt.push_str(&format!(
            "[{} iter {} node {}] {}\n",
            event.sequence, event.iteration, event.node_id, event.payload
        ));
    }

    let request = CompletionRequest {
        role_class: RoleClass::Control,
        messages: vec![Message::system(DISTILL_PROMPT), Message::user(prompt)],
        tools: vec![],
        params: SamplingParams::default(),
    };
    let ctx = CallContext::new(run_id.clone(), Phase::UiTool);
    let rank = gateway.control_rank();
    let done = gateway.complete(&ctx, RoleClass::Control, rank, None, &request)?;

    let text = done.response.message.content.trim();
    let skill = parse_skill(text, Path::new("<model output>")).map_err(|e| {
        SkillError::ValidationFailed(format!("model output is not a skill file: {e}"))
    })?;
    if library.get(&skill.name).is_some() {
        return Err(SkillError::ValidationFailed(format!(
            "name {:?} already exists in the library",
            skill.name
        )));
    }
    let target = root.join(format!("{}.md", skill.name));
    std::fs::write(&target, render_skill(&skill)).map_err(|e| SkillError::Io {
        file: target,
        source: e,
    })?;
    Ok(skill)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::{AuditWriter, RunHeader};
    use crate::clock::RunClock;
    use crate::gateway::scripted::{ScriptRule, ScriptedProvider, ScriptedResponse};
    use crate::gateway::ModelSpec;
    use crate::memory::{EventKind, MemoryScope, Section};
    use crate::sam::NodeId;
    use std::sync::Arc;

    const SLURM: &str = "```meta\nname: slurm\ndescription: submit and monitor batch jobs\ntriggers: slurm, sbatch, job system\npermissions: job_system\n```\n\nUse sbatch to submit; poll with squeue until the job leaves the queue.\n";
    const COMMON_ENV: &str = "```meta\nname: common_env\ndescription: locate the shared software environment\ntriggers: environment, setup\n```\n\nSource the shared setup script before anything else; it provides compilers and python.\n";

    fn library_with(files: &[(&str, &str)]) -> (tempfile::TempDir, SkillLibrary) {
        let dir = tempfile::tempdir().unwrap();
        for (name, content) in files {
            std::fs::write(dir.path().join(name), content).unwrap();
        }
        let lib = load_library(dir.path()).unwrap();
        (dir, lib)
    }

    #[test]
    fn empty_directory_loads_an_empty_library() {
        let (_dir, lib) = library_with(&[]);
        assert!(lib.is_empty());
    }

    #[test]
    fn fixture_skills_load() {
        let (_dir, lib) = library_with(&[("slurm.md", SLURM), ("common_env.md", COMMON_ENV)]);
        assert_eq!(lib.len(), 2);
        let slurm = lib.get("slurm").unwrap();
        assert_eq!(slurm.required_permissions, vec!["job_system"]);
        assert!(slurm.body.contains("sbatch"));
    }

    #[test]
    fn duplicate_names_across_files_are_rejected() {
        let dup = SLURM.replace("slurm, sbatch, job system", "other");
        let err = {
            let dir = tempfile::tempdir().unwrap();
            std::fs::write(dir.path().join("a.md"), SLURM).unwrap();
            std::fs::write(dir.path().join("b.md"), dup).unwrap();
            load_library(dir.path()).unwrap_err()
        };
        assert!(matches!(err, SkillError::DuplicateSkill { name, .. } if name == "slurm"));
    }

    #[test]
    fn missing_name_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bad.md"), "```meta\ndescription: x\n```\nbody\n").unwrap();
        assert!(matches!(
            load_library(dir.path()),
            Err(SkillError::MalformedSkill { .. })
        ));
    }

    #[test]
    fn empty_body_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bad.md"), "```meta\nname: x\n```\n\n").unwrap();
        assert!(matches!(
            load_library(dir.path()),
            Err(SkillError::MalformedSkill { .. })
        ));
    }

    #[test]
    fn selection_follows_metadata_order() {
        let (_dir, lib) = library_with(&[("slurm.md", SLURM), ("common_env.md", COMMON_ENV)]);
        let metadata = TaskMetadata {
            skills: vec!["common_env".into(), "slurm".into()],
            ..TaskMetadata::default()
        };
        let selected = select_skills(&metadata, &lib).unwrap();
        let names: Vec<&str> = selected.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["common_env", "slurm"]);
    }

    #[test]
    fn empty_selection_is_empty() {
        let (_dir, lib) = library_with(&[("slurm.md", SLURM)]);
        let selected = select_skills(&TaskMetadata::default(), &lib).unwrap();
        assert!(selected.is_empty());
    }

    #[test]
    fn typo_in_skill_name_is_loud() {
        let (_dir, lib) = library_with(&[("slurm.md", SLURM)]);
        let metadata = TaskMetadata {
            skills: vec!["slrum".into()],
            ..TaskMetadata::default()
        };
        assert!(matches!(
            select_skills(&metadata, &lib),
            Err(SkillError::UnknownSkill(name)) if name == "slrum"
        ));
    }

    #[test]
    fn triggers_drive_suggestions() {
        let (_dir, lib) = library_with(&[("slurm.md", SLURM), ("common_env.md", COMMON_ENV)]);
        let hits = lib.suggest("please run this through SBATCH on the cluster");
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].name, "slurm");
    }

    fn scripted_gateway(dir: &Path, reply: &str) -> Gateway {
        let gateway = Gateway::new(RunClock::live());
        gateway.register_provider(
            "scripted",
            Arc::new(ScriptedProvider::new(vec![ScriptRule {
                phase: Some(Phase::UiTool),
                matcher: String::new(),
                response: ScriptedResponse::text(reply),
                consume_once: false,
            }])),
        );
        gateway
            .register_model(ModelSpec {
                name: "ctrl".into(),
                provider_id: "scripted".into(),
                rank: 1,
                roles: vec![RoleClass::Control],
                budget_ceiling: f64::INFINITY,
                price_per_token: 0.0,
                flat_cost_estimate: 1.0,
            })
            .unwrap();
        let writer = AuditWriter::open(
            &dir.join("ui.log"),
            RunHeader {
                run_id: RunId::new("ui"),
                source_digest: String::new(),
                created_at: 0,
            },
        )
        .unwrap();
        gateway.attach_audit(RunId::new("ui"), writer);
        gateway
    }

    fn one_memory_entry() -> Vec<MemoryEntry> {
        vec![MemoryEntry {
            scope: MemoryScope::Task(RunId::new("r1")),
            section: Section::Findings,
            body: "the shared env lives under /opt/shared".into(),
            updated_at: 1,
            author_phase: Phase::Review,
            entry_id: 1,
        }]
    }

    fn one_history_event() -> Vec<HistoryEvent> {
        vec![HistoryEvent {
            sequence: 1,
            run_id: RunId::new("r1"),
            iteration: 1,
            node_id: NodeId::root(),
            kind: EventKind::Judgment,
            payload: "pass".into(),
            timestamp: 0,
        }]
    }

    #[test]
    fn scripted_distillation_persists_a_loadable_skill() {
        let (dir, lib) = library_with(&[("slurm.md", SLURM)]);
        let scripted = "```meta\nname: shared_env\ndescription: find the shared env\ntriggers: env\n```\n\nThe shared env lives under /opt/shared; source setup.sh first.";
        let audit_dir = tempfile::tempdir().unwrap();
        let gateway = scripted_gateway(audit_dir.path(), scripted);
        let skill = make_skill(
            &one_memory_entry(),
            &one_history_event(),
            &lib,
            &gateway,
            &RunId::new("ui"),
        )
        .unwrap();
        assert_eq!(skill.name, "shared_env");
        // Golden: the persisted file reloads to exactly the returned skill.
        let reloaded = load_library(dir.path()).unwrap();
        assert_eq!(reloaded.get("shared_env"), Some(&skill));
    }

    #[test]
    fn colliding_name_fails_validation() {
        let (_dir, lib) = library_with(&[("slurm.md", SLURM)]);
        let scripted = "```meta\nname: slurm\n```\n\nbody text";
        let audit_dir = tempfile::tempdir().unwrap();
        let gateway = scripted_gateway(audit_dir.path(), scripted);
        assert!(matches!(
            make_skill(&one_memory_entry(), &[], &lib, &gateway, &RunId::new("ui")),
            Err(SkillError::ValidationFailed(_))
        ));
    }

    #[test]
    fn nothing_to_distill_is_rejected_before_any_call() {
        let (_dir, lib) = library_with(&[]);
        let audit_dir = tempfile::tempdir().unwrap();
        let gateway = scripted_gateway(audit_dir.path(), "irrelevant");
        let err = make_skill(&[], &[], &lib, &gateway, &RunId::new("ui")).unwrap_err();
        assert!(matches!(err, SkillError::ValidationFailed(reason) if reason.contains("nothing")));
    }
}
