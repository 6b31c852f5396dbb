//! Command-surface behavior: exit codes, listings, helper tools.

mod common;

use common::*;
use serde_json::json;

#[test]
fn run_passes_and_reports_summary() {
    let bed = Bed::new(SINGLE_NODE_TASK, &passing_rules());
    let out = bed.run_task("r1", &[]);
    assert_eq!(out.code, 0, "stderr: {}", out.stderr);
    assert_eq!(out.porcelain("outcome").as_deref(), Some("pass"));
    assert_eq!(out.porcelain("iterations_total").as_deref(), Some("1"));
    assert!(bed.task_dir().join("out.txt").exists());
}

#[test]
fn run_is_deterministic_end_to_end() {
    // Same config, same task: same exit code and the same history modulo
    // run ids and timestamps.
    let trajectory = |run: &str| {
        let bed = Bed::new(SINGLE_NODE_TASK, &fail_twice_rules());
        let out = bed.run_task(run, &[]);
        assert_eq!(out.code, 0);
        bed.history(run)
            .into_iter()
            .map(|e| (e.sequence, e.iteration, e.kind, e.node_id))
            .collect::<Vec<_>>()
    };
    assert_eq!(trajectory("r-a"), trajectory("r-b"));
}

#[test]
fn invalid_task_file_lists_violations_and_exits_2() {
    let bad_task = "```meta\ngup: true\nmounts: data:/in:ro\n```\n# T\n## To-do\nx\n## Expectation\ny\n";
    let bed = Bed::new(bad_task, &passing_rules());
    let task = bed.task_file.to_string_lossy().into_owned();
    let out = bed.scifi(&["validate", &task]);
    assert_eq!(out.code, 2);
    assert!(out.stdout.contains("unknown-metadata-key"));
    assert!(out.stdout.contains("relative-mount-host-path"));
    // run refuses the same file before any model call.
    let out = bed.run_task("r1", &[]);
    assert_eq!(out.code, 2);
    assert!(!bed.store().audit_file(&scifi_core::store::RunId::new("r1")).exists());
}

#[test]
fn parse_error_is_also_exit_2() {
    let bed = Bed::new("# T\n## To-do\nonly a todo\n", &passing_rules());
    let task = bed.task_file.to_string_lossy().into_owned();
    let out = bed.scifi(&["validate", &task]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("Expectation"));
}

#[test]
fn limit_exceeded_maps_to_exit_3() {
    let rules = json!([
        plan_rule("", "{}"),
        claim_rule("", true, "claiming"),
        verdict_rule("", "fail", "never right", "again"),
        distill_rule(),
    ]);
    let bed = Bed::new(SINGLE_NODE_TASK, &rules);
    let out = bed.run_task("r1", &["--max-iterations", "3"]);
    assert_eq!(out.code, 3, "stderr: {}", out.stderr);
    assert_eq!(
        out.porcelain("outcome").as_deref(),
        Some("limit-exceeded: iterations")
    );
}

#[test]
fn missing_audit_replay_is_exit_7() {
    let bed = Bed::new(SINGLE_NODE_TASK, &passing_rules());
    let task = bed.task_file.to_string_lossy().into_owned();
    let out = bed.scifi(&["replay", &task, "--run-id", "never-ran"]);
    assert_eq!(out.code, 7);
    assert!(out.stderr.contains("audit log missing"));
}

#[test]
fn replay_after_task_edit_is_exit_4() {
    let bed = Bed::new(SINGLE_NODE_TASK, &passing_rules());
    assert_eq!(bed.run_task("r1", &[]).code, 0);
    let mut raw = std::fs::read_to_string(&bed.task_file).unwrap();
    raw.push_str("\nedited after the run\n");
    std::fs::write(&bed.task_file, raw).unwrap();
    let task = bed.task_file.to_string_lossy().into_owned();
    let out = bed.scifi(&["replay", &task, "--run-id", "r1"]);
    assert_eq!(out.code, 4);
}

#[test]
fn export_audit_emits_one_line_per_call_and_redacts() {
    let bed = Bed::new(SINGLE_NODE_TASK, &passing_rules());
    assert_eq!(bed.run_task("r1", &[]).code, 0);
    let records = bed.audit("r1").len();
    let task = bed.task_file.to_string_lossy().into_owned();
    let out = bed.scifi(&["export-audit", &task, "--run-id", "r1"]);
    assert_eq!(out.code, 0);
    let lines: Vec<&str> = out.stdout.lines().filter(|l| !l.is_empty()).collect();
    assert_eq!(lines.len(), records);
    for line in lines {
        let value: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(value.get("request").is_some());
        assert!(value.get("verdict_context").is_some());
    }
}

#[test]
fn export_redaction_scrubs_env_secrets() {
    let secret = "sk-live-oh-no-a-credential";
    let task_with_secret = format!(
        "# T\n\n## Context\nuse key {secret} for the api\n\n## To-do\nwork\n\n## Expectation\nout.txt exists and contains 42.\n"
    );
    let rules = json!([
        plan_rule("", "{}"),
        claim_rule("exit: ", true, "done"),
        shell_rule("work", "", "echo 42 > out.txt"),
        verdict_rule("", "pass", "present", ""),
        distill_rule(),
    ]);
    let bed = Bed::new(&task_with_secret, &rules);
    assert_eq!(bed.run_task("r1", &[]).code, 0);
    let task = bed.task_file.to_string_lossy().into_owned();
    let output = std::process::Command::new(env!("CARGO_BIN_EXE_scifi"))
        .arg("--config")
        .arg(&bed.config)
        .arg("--store-root")
        .arg(&bed.store_root)
        .args(["export-audit", &task, "--run-id", "r1", "--redact-env", "FAKE_CRED"])
        .env("FAKE_CRED", secret)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(!stdout.contains(secret), "credential value must never appear");
    assert!(stdout.contains("[REDACTED]"));
}

#[test]
fn task_maker_repairs_then_gives_up_on_persistent_garbage() {
    let rules = json!([
        { "phase": "ui-tool", "matcher": "", "response": { "text": "this is not a task file at all" } }
    ]);
    let bed = Bed::new(SINGLE_NODE_TASK, &rules);
    let rules_path = bed.rules.to_string_lossy().into_owned();
    let out = bed.scifi(&["task-maker", "make me a task", "--scripted", &rules_path]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.contains("unrepairable"));
    // The model was consulted 1 + 2 repair times.
    let ui_audits: Vec<_> = std::fs::read_dir(bed.store_root.join("audit"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "log"))
        .collect();
    assert_eq!(ui_audits.len(), 1);
    let (_, records) = scifi_core::audit::load(&ui_audits[0]).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records
        .iter()
        .all(|r| r.phase == scifi_core::store::Phase::UiTool));
}

#[test]
fn task_maker_repair_loop_accepts_a_second_try() {
    let fixed = "# Fixed\n\n## To-do\nwork\n\n## Expectation\ndone marker exists.";
    let rules = json!([
        { "phase": "ui-tool", "matcher": "invalid", "response": { "text": fixed } },
        { "phase": "ui-tool", "matcher": "", "response": { "text": "garbage first answer" } }
    ]);
    let bed = Bed::new(SINGLE_NODE_TASK, &rules);
    let rules_path = bed.rules.to_string_lossy().into_owned();
    let out_file = bed.dir.path().join("made.md");
    let out = bed.scifi(&[
        "task-maker",
        "make me a task",
        "--scripted",
        &rules_path,
        "-o",
        out_file.to_str().unwrap(),
    ]);
    assert_eq!(out.code, 0, "stderr: {}", out.stderr);
    let made = std::fs::read_to_string(&out_file).unwrap();
    let doc = scifi_core::sam::parse_sam(&made, &out_file).unwrap();
    assert!(scifi_core::sam::validate(&doc).is_empty());
    assert!(doc.root.context.unwrap().contains("make me a task"));
}

#[test]
fn ask_answers_and_empty_question_is_usage_error() {
    let rules = json!([
        { "phase": "ui-tool", "matcher": "GPU", "response": { "text": "Set gpu: true in the meta block." } }
    ]);
    let bed = Bed::new(SINGLE_NODE_TASK, &rules);
    let rules_path = bed.rules.to_string_lossy().into_owned();
    let out = bed.scifi(&["ask", "how do I get GPU access?", "--scripted", &rules_path]);
    assert_eq!(out.code, 0);
    assert!(out.stdout.contains("gpu: true"));

    let out = bed.scifi(&["ask", "   ", "--scripted", &rules_path]);
    assert_eq!(out.code, 1);

    // Missing notes override degrades loudly instead of failing.
    let rules = json!([
        { "phase": "ui-tool", "matcher": "", "response": { "text": "general answer" } }
    ]);
    std::fs::write(&bed.rules, serde_json::to_string(&rules).unwrap()).unwrap();
    let out = bed.scifi(&[
        "ask",
        "anything",
        "--scripted",
        &rules_path,
        "--notes",
        "/definitely/not/here.md",
    ]);
    assert_eq!(out.code, 0);
    assert!(out.stdout.contains("ungrounded"));
}

#[test]
fn a_killed_run_resumes_and_its_combined_tape_replays() {
    // Iteration 1's work stalls in a long sleep; the process is killed
    // mid-iteration. The resume restarts iteration 1 from the stores, the
    // second work attempt succeeds, and the combined tape still replays.
    let rules = json!([
        plan_rule("", "{}"),
        claim_rule("exit: ", true, "done"),
        shell_rule(
            "work",
            "",
            "if [ -f resumed-marker ]; then echo 42 > out.txt; else touch resumed-marker && sleep 30; fi"
        ),
        verdict_rule("", "pass", "verified", ""),
        distill_rule(),
    ]);
    let bed = Bed::new(SINGLE_NODE_TASK, &rules);
    let task = bed.task_file.to_string_lossy().into_owned();
    let rules_path = bed.rules.to_string_lossy().into_owned();
    let mut child = std::process::Command::new(env!("CARGO_BIN_EXE_scifi"))
        .arg("--config")
        .arg(&bed.config)
        .arg("--store-root")
        .arg(&bed.store_root)
        .args(["run", &task, "--run-id", "r-kill", "--driver", "process", "--scripted", &rules_path])
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    // Wait until the first work call is recorded (its tool is executing),
    // then kill the orchestrator mid-iteration.
    let marker = bed.task_dir().join("resumed-marker");
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(20);
    while !marker.exists() && std::time::Instant::now() < deadline {
        std::thread::sleep(std::time::Duration::from_millis(20));
    }
    assert!(marker.exists(), "run never reached the work phase");
    child.kill().unwrap();
    let _ = child.wait();

    // The interrupted iteration never completed: no history events yet.
    assert!(bed.history("r-kill").is_empty());

    // Resume from the stores; iteration 1 runs again and passes (the
    // marker file steers the retried command down the short path).
    let out = bed.run_task("r-kill", &[]);
    assert_eq!(out.code, 0, "stderr: {}", out.stderr);
    assert_eq!(out.porcelain("iterations_total").as_deref(), Some("1"));
    assert!(bed.task_dir().join("out.txt").exists());

    // The combined tape (killed invocation + resumed invocation) replays
    // byte-identically.
    let replay = bed.scifi(&["--porcelain", "replay", &task, "--run-id", "r-kill"]);
    assert_eq!(replay.code, 0, "stderr: {}", replay.stderr);
    assert_eq!(replay.porcelain("history_match").as_deref(), Some("yes"));
}

#[test]
fn resume_with_an_edited_task_file_is_refused_as_tamper() {
    let bed = Bed::new(SINGLE_NODE_TASK, &fail_twice_rules());
    assert_eq!(bed.run_task("r1", &["--max-iterations", "1"]).code, 3);
    let mut raw = std::fs::read_to_string(&bed.task_file).unwrap();
    raw.push_str("\nquietly relaxed\n");
    std::fs::write(&bed.task_file, raw).unwrap();
    let out = bed.run_task("r1", &[]);
    assert_eq!(out.code, 4, "stderr: {}", out.stderr);
    assert!(out.stderr.contains("resume refused"));
}

#[test]
fn resource_resolution_failure_exits_6_before_any_model_call() {
    let task = "```meta\nmounts: /definitely/not/here:/data:ro\n```\n# T\n## To-do\nx\n## Expectation\nout.txt exists and contains 42.\n";
    let bed = Bed::new(task, &passing_rules());
    let out = bed.run_task("r1", &[]);
    assert_eq!(out.code, 6, "stderr: {}", out.stderr);
    assert!(out.stderr.contains("mount source"));
    // Resolution happens strictly before the gateway exists: no audit file.
    assert!(!bed.store().audit_file(&scifi_core::store::RunId::new("r1")).exists());
}

#[test]
fn skill_maker_distills_a_run_into_a_loadable_skill() {
    let bed = Bed::new(SINGLE_NODE_TASK, &fail_twice_rules());
    assert_eq!(bed.run_task("r1", &[]).code, 0);

    let skill_text = "```meta\nname: made_by_test\ndescription: distillate\ntriggers: answer\n```\n\nWrite the file, then verify it with cat before claiming done.";
    let rules = json!([
        { "phase": "ui-tool", "matcher": "", "response": { "text": skill_text } }
    ]);
    std::fs::write(&bed.rules, serde_json::to_string(&rules).unwrap()).unwrap();
    let task = bed.task_file.to_string_lossy().into_owned();
    let rules_path = bed.rules.to_string_lossy().into_owned();
    let skills_dir = bed.dir.path().join("skills");
    let out = bed.scifi(&[
        "--skills-dir",
        skills_dir.to_str().unwrap(),
        "skill-maker",
        &task,
        "--run-id",
        "r1",
        "--scripted",
        &rules_path,
    ]);
    assert_eq!(out.code, 0, "stderr: {}", out.stderr);
    let library = scifi_core::skills::load_library(&skills_dir).unwrap();
    let skill = library.get("made_by_test").expect("skill persisted");
    assert!(skill.body.contains("verify it with cat"));
}

#[test]
fn unknown_skill_name_fails_loudly_before_any_call() {
    let task = "```meta\nskills: not_a_skill\n```\n# T\n## To-do\nx\n## Expectation\nout.txt exists and contains 42.\n";
    let bed = Bed::new(task, &passing_rules());
    let out = bed.run_task("r1", &[]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("not_a_skill"));
}
