#![allow(dead_code)] // shared across test binaries; each uses a subset

//! Test bed for driving the `scifi` binary against scripted gateways.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value};

pub const SCRIPTED_CONFIG: &str = r#"
[[model]]
name = "demo-model"
provider = "scripted"
rank = 1
roles = ["control", "work"]
"#;

pub const SINGLE_NODE_TASK: &str = "\
# Produce the answer file

## To-do
Create out.txt containing 42.

## Expectation
The file out.txt exists and contains 42.
";

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Output {
    pub fn porcelain(&self, key: &str) -> Option<String> {
        self.stdout
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key} ")))
            .map(str::to_string)
    }
}

pub struct Bed {
    pub dir: tempfile::TempDir,
    pub task_file: PathBuf,
    pub config: PathBuf,
    pub rules: PathBuf,
    pub store_root: PathBuf,
}

impl Bed {
    pub fn new(task_md: &str, rules: &Value) -> Bed {
        Bed::with_config(task_md, rules, SCRIPTED_CONFIG)
    }

    pub fn with_config(task_md: &str, rules: &Value, config_toml: &str) -> Bed {
        let dir = tempfile::tempdir().unwrap();
        let task_dir = dir.path().join("task");
        std::fs::create_dir_all(&task_dir).unwrap();
        let task_file = task_dir.join("task.md");
        std::fs::write(&task_file, task_md).unwrap();
        let config = dir.path().join("gateway.toml");
        std::fs::write(&config, config_toml).unwrap();
        let rules_path = dir.path().join("rules.json");
        std::fs::write(&rules_path, serde_json::to_string_pretty(rules).unwrap()).unwrap();
        let store_root = dir.path().join("store");
        Bed {
            dir,
            task_file,
            config,
            rules: rules_path,
            store_root,
        }
    }

    pub fn task_dir(&self) -> PathBuf {
        self.task_file.parent().unwrap().to_path_buf()
    }

    pub fn scifi(&self, args: &[&str]) -> Output {
        let output = Command::new(env!("CARGO_BIN_EXE_scifi"))
            .arg("--config")
            .arg(&self.config)
            .arg("--store-root")
            .arg(&self.store_root)
            .args(args)
            .output()
            .expect("binary runs");
        Output {
            code: output.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&output.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
        }
    }

    /// `scifi run` with the scripted gateway and process driver.
    pub fn run_task(&self, run_id: &str, extra: &[&str]) -> Output {
        let task = self.task_file.to_string_lossy().into_owned();
        let rules = self.rules.to_string_lossy().into_owned();
        let mut args = vec![
            "--porcelain",
            "run",
            task.as_str(),
            "--run-id",
            run_id,
            "--driver",
            "process",
            "--scripted",
            rules.as_str(),
        ];
        args.extend_from_slice(extra);
        self.scifi(&args)
    }

    pub fn store(&self) -> scifi_core::store::StorePaths {
        scifi_core::store::StorePaths::for_task(&self.task_dir(), &self.store_root)
    }

    pub fn history(&self, run_id: &str) -> Vec<scifi_core::memory::HistoryEvent> {
        scifi_core::memory::MemoryStore::new(self.store())
            .read_history(
                &scifi_core::store::RunId::new(run_id),
                &scifi_core::memory::EventFilter::default(),
            )
            .unwrap()
    }

    pub fn audit(&self, run_id: &str) -> Vec<scifi_core::audit::AuditRecord> {
        scifi_core::audit::load(&self.store().audit_file(&scifi_core::store::RunId::new(run_id)))
            .unwrap()
            .1
    }

    pub fn task_memory(&self, run_id: &str) -> Vec<scifi_core::memory::MemoryEntry> {
        scifi_core::memory::MemoryStore::new(self.store())
            .read_memory(&scifi_core::memory::MemoryScope::Task(
                scifi_core::store::RunId::new(run_id),
            ))
            .unwrap()
    }
}

pub fn shell_rule(phase: &str, matcher: &str, command: &str) -> Value {
    json!({
        "phase": phase,
        "matcher": matcher,
        "response": { "tool_calls": [ { "name": "shell", "arguments": { "command": command } } ] }
    })
}

pub fn claim_rule(matcher: &str, completed: bool, summary: &str) -> Value {
    json!({
        "phase": "work",
        "matcher": matcher,
        "response": { "tool_calls": [ { "name": "task_complete",
            "arguments": { "completed": completed, "summary": summary } } ] }
    })
}

pub fn verdict_rule(matcher: &str, outcome: &str, reason: &str, fixes: &str) -> Value {
    json!({
        "phase": "review",
        "matcher": matcher,
        "response": { "tool_calls": [ { "name": "verdict",
            "arguments": { "outcome": outcome, "reason": reason, "suggested_fixes": fixes } } ] }
    })
}

pub fn plan_rule(matcher: &str, plan_json: &str) -> Value {
    json!({ "phase": "pre-scan", "matcher": matcher, "response": { "text": plan_json } })
}

pub fn distill_rule() -> Value {
    json!({
        "phase": "final-review",
        "matcher": "",
        "response": { "text": "{\"task_group\": \"tg note\", \"global\": \"g note\"}" }
    })
}

/// The standard fail-twice-then-pass rule set.
pub fn fail_twice_rules() -> Value {
    json!([
        plan_rule("", "{}"),
        claim_rule("exit: ", true, "done"),
        shell_rule("work", "", "echo 42 > out.txt"),
        verdict_rule("iteration: 1", "fail", "content not verified", "fix A"),
        verdict_rule("iteration: 2", "fail", "still not verified", "fix B"),
        verdict_rule("", "pass", "verified", ""),
        distill_rule(),
    ])
}

/// The always-passing rule set.
pub fn passing_rules() -> Value {
    json!([
        plan_rule("", "{}"),
        claim_rule("exit: ", true, "done"),
        shell_rule("work", "", "echo 42 > out.txt"),
        verdict_rule("", "pass", "verified", ""),
        distill_rule(),
    ])
}

/// Fixture directory shared with the core crate's parser suite.
pub fn parser_fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/tasks")
}

/// Repo-level skill library shipped with the project.
pub fn shipped_skills_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../skills")
}
