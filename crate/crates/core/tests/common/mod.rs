#![allow(dead_code)] // shared across test binaries; each uses a subset

//! Shared scaffolding for the scripted end-to-end scenarios.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use scifi_core::audit::{AuditWriter, RunHeader};
use scifi_core::clock::RunClock;
use scifi_core::engine::{Engine, EngineError, RunConfig, TaskRunResult};
use scifi_core::gateway::scripted::{ScriptRule, ScriptedProvider, ScriptedResponse};
use scifi_core::gateway::types::RoleClass;
use scifi_core::gateway::{Gateway, ModelSpec};
use scifi_core::memory::MemoryStore;
use scifi_core::sam::{parse_sam, SamDocument, TaskMetadata};
use scifi_core::sandbox::{resolve_resources, SandboxDriver, SandboxHandle, ToolRunner};
use scifi_core::skills::Skill;
use scifi_core::store::{Phase, RunId, StorePaths};

pub const SINGLE_NODE_TASK: &str = "\
# Produce the answer file

## To-do
Create out.txt containing 42.

## Expectation
The file out.txt exists and contains 42.
";

/// A scripted model that serves both roles at rank 1.
pub fn model(name: &str, rank: u32, ceiling: f64) -> ModelSpec {
    ModelSpec {
        name: name.to_string(),
        provider_id: "scripted".to_string(),
        rank,
        roles: vec![RoleClass::Control, RoleClass::Work],
        budget_ceiling: ceiling,
        price_per_token: 0.0,
        flat_cost_estimate: 1.0,
    }
}

pub fn rule(phase: Phase, matcher: &str, response: ScriptedResponse) -> ScriptRule {
    ScriptRule {
        phase: Some(phase),
        matcher: matcher.to_string(),
        response,
        consume_once: false,
    }
}

pub fn text(body: &str) -> ScriptedResponse {
    ScriptedResponse::text(body)
}

pub fn shell(command: &str) -> ScriptedResponse {
    ScriptedResponse::tool("shell", serde_json::json!({ "command": command }))
}

pub fn task_complete(completed: bool, summary: &str) -> ScriptedResponse {
    ScriptedResponse::tool(
        "task_complete",
        serde_json::json!({ "completed": completed, "summary": summary }),
    )
}

pub fn verdict(outcome: &str, reason: &str, fixes: &str) -> ScriptedResponse {
    ScriptedResponse::tool(
        "verdict",
        serde_json::json!({ "outcome": outcome, "reason": reason, "suggested_fixes": fixes }),
    )
}

pub fn verdict_with_rank(outcome: &str, reason: &str, fixes: &str, rank: u32) -> ScriptedResponse {
    ScriptedResponse::tool(
        "verdict",
        serde_json::json!({
            "outcome": outcome, "reason": reason, "suggested_fixes": fixes, "work_rank": rank
        }),
    )
}

/// Rules for the plain happy path: default plan, one shell command, claim,
/// pass verdict.
pub fn passing_rules() -> Vec<ScriptRule> {
    vec![
        rule(Phase::PreScan, "", text("{}")),
        rule(Phase::Work, "exit: ", task_complete(true, "wrote out.txt")),
        rule(Phase::Work, "", shell("echo 42 > out.txt")),
        rule(Phase::Review, "", verdict("pass", "out.txt holds 42", "")),
    ]
}

pub struct Scenario {
    pub task_dir: tempfile::TempDir,
    pub store: StorePaths,
    pub run_id: RunId,
    pub doc: SamDocument,
    pub config: RunConfig,
    pub gateway: Arc<Gateway>,
    pub provider: Arc<ScriptedProvider>,
}

impl Scenario {
    /// Write the task file, parse it, wire a scripted gateway with one
    /// dual-role rank-1 model, and attach the audit tap.
    pub fn new(task_md: &str, rules: Vec<ScriptRule>, run: &str) -> Scenario {
        Scenario::with_models(task_md, rules, run, &[model("m1", 1, f64::INFINITY)])
    }

    pub fn with_models(
        task_md: &str,
        rules: Vec<ScriptRule>,
        run: &str,
        models: &[ModelSpec],
    ) -> Scenario {
        let task_dir = tempfile::tempdir().unwrap();
        let task_path = task_dir.path().join("task.md");
        std::fs::write(&task_path, task_md).unwrap();
        let doc = parse_sam(task_md, &task_path).unwrap();

        let store = StorePaths::for_task(task_dir.path(), &task_dir.path().join("global-store"));
        let run_id = RunId::new(run);
        let config = RunConfig::from_metadata(
            run_id.clone(),
            task_dir.path().to_path_buf(),
            &doc.metadata,
            store.clone(),
            Vec::new(),
        );

        let provider = Arc::new(ScriptedProvider::new(rules));
        let gateway = Arc::new(Gateway::new(RunClock::live()));
        gateway.register_provider("scripted", provider.clone());
        for spec in models {
            gateway.register_model(spec.clone()).unwrap();
        }
        let scenario = Scenario {
            store,
            run_id,
            doc,
            config,
            gateway,
            provider,
            task_dir,
        };
        scenario.attach_tap();
        scenario
    }

    /// (Re)attach the audit writer for this run id. The header's clock
    /// origin comes from the gateway clock so replay arithmetic matches.
    pub fn attach_tap(&self) {
        let writer = AuditWriter::open(
            &self.store.audit_file(&self.run_id),
            RunHeader {
                run_id: self.run_id.clone(),
                source_digest: self.doc.source_digest.clone(),
                created_at: self.gateway.clock().now_ms(),
            },
        )
        .unwrap();
        self.gateway.attach_audit(self.run_id.clone(), writer);
    }

    pub fn sandbox(&self) -> Box<dyn ToolRunner> {
        let spec = resolve_resources(&self.doc.metadata, self.task_dir.path()).unwrap();
        Box::new(SandboxHandle::start(&SandboxDriver::Process, &spec).unwrap())
    }

    pub fn engine(&self) -> Engine {
        Engine::new(
            self.doc.clone(),
            self.config.clone(),
            self.gateway.clone(),
            self.sandbox(),
        )
        .unwrap()
    }

    pub fn run(&self) -> Result<TaskRunResult, EngineError> {
        self.engine().run()
    }

    pub fn memory(&self) -> MemoryStore {
        MemoryStore::new(self.store.clone())
    }

    pub fn task_path(&self) -> std::path::PathBuf {
        self.task_dir.path().join("task.md")
    }

    pub fn with_skills(mut self, skills: Vec<Skill>) -> Scenario {
        self.config.skills = skills;
        self
    }

    pub fn with_limits(mut self, max_iterations: u32, wall: Duration) -> Scenario {
        self.config.max_iterations = max_iterations;
        self.config.wall_time_limit = wall;
        self
    }

    pub fn with_slice(mut self, slice: Duration) -> Scenario {
        self.config.work_slice_override = Some(slice);
        self
    }
}

/// A tool runner whose every command fails with a permission error, for
/// exercising the surface-the-error-to-the-model path.
pub struct DenyingRunner;

impl ToolRunner for DenyingRunner {
    fn run_shell(
        &mut self,
        _call_id: &str,
        command: &str,
        _timeout: Duration,
    ) -> Result<scifi_core::sandbox::ToolOutcome, scifi_core::sandbox::SandboxError> {
        Ok(scifi_core::sandbox::ToolOutcome {
            content: format!(
                "exit: 1\ntimed_out: false\nduration_ms: 1\nstdout:\n\nstderr:\nsh: {command}: permission denied: read-only bind mount"
            ),
            exit_code: 1,
            duration_ms: 1,
            timed_out: false,
        })
    }
}

/// Load every audit record of a scenario run.
pub fn audit_records(store: &StorePaths, run: &RunId) -> Vec<scifi_core::audit::AuditRecord> {
    scifi_core::audit::load(&store.audit_file(run)).unwrap().1
}

/// Read the raw history file of a run.
pub fn history_bytes(store: &StorePaths, run: &RunId) -> Vec<u8> {
    std::fs::read(store.history_file(run)).unwrap()
}

/// Seed a task metadata value for tests that need one without a file.
pub fn default_metadata() -> TaskMetadata {
    TaskMetadata::default()
}

/// Convenience: parse a task in a temp dir without running it.
pub fn parse_in_dir(dir: &Path, task_md: &str) -> SamDocument {
    let path = dir.join("task.md");
    std::fs::write(&path, task_md).unwrap();
    parse_sam(task_md, &path).unwrap()
}
