//! The deterministic commands: run, validate, replay, export-audit.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use scifi_core::audit::{export_records, RedactionProfile};
use scifi_core::audit::{AuditWriter, RunHeader};
use scifi_core::clock::{format_ms, wall_now_ms, RunClock};
use scifi_core::engine::{replay_task, Engine, RunConfig, RunOutcome, TaskRunResult};
use scifi_core::gateway::Gateway;
use scifi_core::memory::{EventFilter, MemoryStore};
use scifi_core::sam::{parse_sam_file, validate as validate_doc, SamDocument};
use scifi_core::sandbox::{resolve_resources, SandboxDriver, SandboxHandle};
use scifi_core::skills::{select_skills, Skill};
use scifi_core::store::{RunId, StorePaths};

use crate::setup::{generate_run_id, Globals};

pub struct RunArgs {
    pub task_file: PathBuf,
    pub run_id: Option<String>,
    pub driver: String,
    pub image: Option<PathBuf>,
    pub container_bin: String,
    pub max_iterations: Option<u32>,
    pub wall_time_limit: Option<u64>,
    pub work_slice: Option<u64>,
    pub scripted: Option<PathBuf>,
}

/// Parse and lint; print violations; exit 2 unless fully valid.
pub fn validate(globals: &Globals, task_file: &Path) -> Result<u8> {
    let doc = match parse_sam_file(task_file) {
        Ok(doc) => doc,
        Err(e) => {
            eprintln!("parse error: {e}");
            return Ok(2);
        }
    };
    let violations = validate_doc(&doc);
    if violations.is_empty() {
        if globals.porcelain {
            println!("valid true");
            println!("nodes {}", doc.nodes().len());
        } else {
            println!(
                "{}: valid ({} node{})",
                task_file.display(),
                doc.nodes().len(),
                if doc.nodes().len() == 1 { "" } else { "s" }
            );
        }
        return Ok(0);
    }
    for violation in &violations {
        if globals.porcelain {
            println!("violation {} {}", violation.code(), violation);
        } else {
            println!("violation [{}]: {}", violation.code(), violation);
        }
    }
    Ok(2)
}

fn load_task(task_file: &Path) -> Result<(SamDocument, PathBuf), u8> {
    let doc = match parse_sam_file(task_file) {
        Ok(doc) => doc,
        Err(e) => {
            eprintln!("parse error: {e}");
            return Err(2);
        }
    };
    let folder = task_file
        .canonicalize()
        .ok()
        .and_then(|p| p.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((doc, folder))
}

fn selected_skills(globals: &Globals, doc: &SamDocument) -> Result<Vec<Skill>, u8> {
    let library = match globals.load_skills() {
        Ok(library) => library,
        Err(e) => {
            eprintln!("{e:#}");
            return Err(1);
        }
    };
    match select_skills(&doc.metadata, &library) {
        Ok(skills) => Ok(skills.into_iter().cloned().collect()),
        Err(e) => {
            eprintln!("skill selection: {e}");
            Err(2)
        }
    }
}

pub fn exit_code_for(outcome: &RunOutcome) -> u8 {
    match outcome {
        RunOutcome::Pass => 0,
        RunOutcome::LimitExceeded(_) => 3,
        RunOutcome::TamperDetected(_) => 4,
        RunOutcome::GatewayExhausted => 5,
        RunOutcome::SandboxFailure(_) => 6,
    }
}

fn print_summary(
    globals: &Globals,
    result: &TaskRunResult,
    run_id: &RunId,
    store: &StorePaths,
) {
    if globals.porcelain {
        println!("outcome {}", result.outcome.summary());
        println!("run_id {run_id}");
        println!("iterations_total {}", result.total_iterations);
        println!("iterations_this_invocation {}", result.iterations.len());
        println!("wall_ms {}", result.wall_time.as_millis());
        for (node, verdict) in &result.node_verdicts {
            println!("node {node} {verdict}");
        }
        println!("history {}", store.history_file(run_id).display());
        println!("audit {}", store.audit_file(run_id).display());
        println!(
            "memory {}",
            store.task_memory_file(run_id).display()
        );
        return;
    }
    println!("run {run_id}: {}", result.outcome.summary());
    println!(
        "  iterations: {} total ({} this invocation), wall time {:.1}s",
        result.total_iterations,
        result.iterations.len(),
        result.wall_time.as_secs_f64()
    );
    for (node, verdict) in &result.node_verdicts {
        println!("  {node}: {verdict}");
    }
    println!("  history: {}", store.history_file(run_id).display());
    println!("  audit:   {}", store.audit_file(run_id).display());
}

pub fn run(globals: &Globals, args: RunArgs) -> Result<u8> {
    let (doc, task_folder) = match load_task(&args.task_file) {
        Ok(v) => v,
        Err(code) => return Ok(code),
    };
    let violations = validate_doc(&doc);
    if !violations.is_empty() {
        for violation in &violations {
            eprintln!("violation [{}]: {}", violation.code(), violation);
        }
        return Ok(2);
    }
    let skills = match selected_skills(globals, &doc) {
        Ok(skills) => skills,
        Err(code) => return Ok(code),
    };

    // Resources resolve before anything else can run; only then does the
    // sandbox start and only then can a model be called.
    let spec = match resolve_resources(&doc.metadata, &task_folder) {
        Ok(spec) => spec,
        Err(e) => {
            eprintln!("resource resolution: {e}");
            return Ok(6);
        }
    };
    let driver = match args.driver.as_str() {
        "process" => {
            eprintln!(
                "warning: process driver gives no isolation; use --driver container for real runs"
            );
            SandboxDriver::Process
        }
        "container" => {
            let Some(image) = args.image.clone() else {
                bail!("--driver container requires --image <path>");
            };
            SandboxDriver::Container {
                binary: args.container_bin.clone(),
                image,
            }
        }
        other => bail!("unknown driver {other:?} (process|container)"),
    };
    let sandbox = match SandboxHandle::start(&driver, &spec) {
        Ok(handle) => handle,
        Err(e) => {
            eprintln!("sandbox: {e}");
            return Ok(6);
        }
    };

    let clock = RunClock::live();
    let (gateway, _config) = globals.build_gateway(clock, args.scripted.as_deref())?;
    let run_id = args
        .run_id
        .map(RunId::new)
        .unwrap_or_else(generate_run_id);
    let store = StorePaths::for_task(&task_folder, &globals.store_root);
    // The header pins the logical-clock origin; taking it from the gateway
    // clock (not a fresh wall sample) keeps replay's elapsed-time arithmetic
    // exactly equal to the live run's.
    let writer = match AuditWriter::open(
        &store.audit_file(&run_id),
        RunHeader {
            run_id: run_id.clone(),
            source_digest: doc.source_digest.clone(),
            created_at: gateway.clock().now_ms(),
        },
    ) {
        Ok(writer) => writer,
        Err(e @ scifi_core::audit::AuditError::TaskChanged { .. }) => {
            eprintln!("resume refused: {e}");
            return Ok(4);
        }
        Err(e) => return Err(e).context("audit log"),
    };
    gateway.attach_audit(run_id.clone(), writer);

    let mut config =
        RunConfig::from_metadata(run_id.clone(), task_folder, &doc.metadata, store.clone(), skills);
    if let Some(n) = args.max_iterations {
        config.max_iterations = n;
    }
    if let Some(secs) = args.wall_time_limit {
        config.wall_time_limit = Duration::from_secs(secs);
    }
    if let Some(secs) = args.work_slice {
        config.work_slice_override = Some(Duration::from_secs(secs));
    }

    let engine = Engine::new(doc, config, gateway.clone(), Box::new(sandbox))
        .context("engine setup")?;
    let result = engine.run().context("run failed")?;
    gateway.detach_audit(&run_id);
    print_summary(globals, &result, &run_id, &store);
    Ok(exit_code_for(&result.outcome))
}

pub fn replay(globals: &Globals, task_file: &Path, run_id: &str) -> Result<u8> {
    let (doc, task_folder) = match load_task(task_file) {
        Ok(v) => v,
        Err(code) => return Ok(code),
    };
    let skills = match selected_skills(globals, &doc) {
        Ok(skills) => skills,
        Err(code) => return Ok(code),
    };
    let run_id = RunId::new(run_id);
    let store = StorePaths::for_task(&task_folder, &globals.store_root);
    let config = RunConfig::from_metadata(
        run_id.clone(),
        task_folder,
        &doc.metadata,
        store.clone(),
        skills,
    );
    let audit_path = store.audit_file(&run_id);
    let outcome = match replay_task(&doc, &config, &audit_path) {
        Ok(outcome) => outcome,
        Err(scifi_core::engine::EngineError::Replay(e)) => {
            eprintln!("replay: {e}");
            return Ok(7);
        }
        Err(scifi_core::engine::EngineError::Audit(e)) => {
            eprintln!("replay: {e}");
            return Ok(7);
        }
        Err(e) => return Err(e).context("replay failed"),
    };

    if let RunOutcome::TamperDetected(msg) = &outcome.result.outcome {
        eprintln!("replay refused: {msg}");
        return Ok(4);
    }
    let matched = outcome.history_matches;
    if globals.porcelain {
        println!("outcome {}", outcome.result.outcome.summary());
        println!("records {}", outcome.records_total);
        println!("history_match {}", if matched { "yes" } else { "no" });
        println!(
            "replay_history {}",
            outcome.replay_store.history_file(&run_id).display()
        );
    } else {
        println!(
            "replayed {} records; outcome: {}",
            outcome.records_total,
            outcome.result.outcome.summary()
        );
        println!("history tape match: {}", if matched { "yes" } else { "no" });
    }
    Ok(if matched { 0 } else { 7 })
}

pub fn export_audit(
    globals: &Globals,
    task_file: &Path,
    run_id: &str,
    redact_env: &[String],
    output: Option<&Path>,
) -> Result<u8> {
    let (_, task_folder) = match load_task(task_file) {
        Ok(v) => v,
        Err(code) => return Ok(code),
    };
    let run_id = RunId::new(run_id);
    let store = StorePaths::for_task(&task_folder, &globals.store_root);

    // Scrub configured credentials plus anything the caller names.
    let mut env_vars: Vec<String> = redact_env.to_vec();
    if let Ok(config) = globals.load_gateway_config() {
        env_vars.extend(Gateway::credential_env_vars(&config));
    }
    let profile = RedactionProfile::from_env_vars(&env_vars);

    let history = MemoryStore::new(store.clone())
        .read_history(&run_id, &EventFilter::default())
        .map_err(|e| anyhow::anyhow!("history: {e}"))?;
    let lines = match export_records(&store.audit_file(&run_id), &history, &profile) {
        Ok(lines) => lines,
        Err(e) => {
            eprintln!("export: {e}");
            return Ok(7);
        }
    };
    let body = lines.join("\n") + if lines.is_empty() { "" } else { "\n" };
    match output {
        Some(path) => std::fs::write(path, body)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{body}"),
    }
    eprintln!(
        "exported {} record{} from run {run_id} ({})",
        lines.len(),
        if lines.len() == 1 { "" } else { "s" },
        format_ms(wall_now_ms()),
    );
    Ok(0)
}
