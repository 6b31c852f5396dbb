//! `scifi`: deterministic command surface over the task orchestrator.
//!
//! Exit codes (stable, scriptable):
//!   0  success / root expectation verified / replay matched
//!   1  usage, configuration, or internal error
//!   2  task file invalid (parse error or lint violations)
//!   3  hard limit exceeded (iterations or wall time)
//!   4  task-file tampering detected
//!   5  model gateway exhausted (budgets/providers)
//!   6  sandbox failure
//!   7  audit/replay error (missing tape, sequence gap, divergence)

mod commands;
mod setup;
mod ui_tools;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "scifi", version, about = "Closed-loop task orchestrator")]
struct Cli {
    /// Gateway config file (TOML). Defaults to $SCIFI_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root for cross-task stores (global memory, UI-tool audit).
    /// Defaults to $SCIFI_STORE_ROOT, then ~/.scifi.
    #[arg(long, global = true)]
    store_root: Option<PathBuf>,
    /// Skill library directory. Defaults to $SCIFI_SKILLS_DIR, then
    /// <store-root>/skills.
    #[arg(long, global = true)]
    skills_dir: Option<PathBuf>,
    /// Machine-readable line-delimited summary output.
    #[arg(long, global = true)]
    porcelain: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a task file through the agent loop until its expectation is
    /// verified or a hard limit fires.
    Run {
        task_file: PathBuf,
        /// Run identifier; generated when omitted. Reusing the id of an
        /// interrupted run resumes it from the stores.
        #[arg(long)]
        run_id: Option<String>,
        /// Isolation driver. `container` is the secure default; `process`
        /// is a non-secure fallback for machines without a runtime.
        #[arg(long, default_value = "container")]
        driver: String,
        /// Container image (required with --driver container).
        #[arg(long)]
        image: Option<PathBuf>,
        /// Container binary.
        #[arg(long, default_value = "apptainer")]
        container_bin: String,
        /// Override the task file's iteration limit.
        #[arg(long)]
        max_iterations: Option<u32>,
        /// Override the task file's wall-time limit (seconds).
        #[arg(long)]
        wall_time_limit: Option<u64>,
        /// Explicit per-iteration work slice (seconds).
        #[arg(long)]
        work_slice: Option<u64>,
        /// Scripted-backend rules file (JSON), for models configured with
        /// provider = "scripted".
        #[arg(long)]
        scripted: Option<PathBuf>,
    },
    /// Parse and lint a task file; exit 0 only when it is fully valid.
    Validate { task_file: PathBuf },
    /// Re-execute a recorded run from its audit tape and report whether the
    /// history matches byte for byte.
    Replay {
        task_file: PathBuf,
        #[arg(long)]
        run_id: String,
    },
    /// Export a run's model calls as redacted JSON lines.
    ExportAudit {
        task_file: PathBuf,
        #[arg(long)]
        run_id: String,
        /// Environment variables whose values must be scrubbed (the
        /// credential variables from the gateway config are always added).
        #[arg(long = "redact-env")]
        redact_env: Vec<String>,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Turn a natural-language request into a valid task file.
    TaskMaker {
        /// The request, in plain language.
        text: String,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        scripted: Option<PathBuf>,
    },
    /// Distill a finished run's memory and history into a new skill.
    SkillMaker {
        task_file: PathBuf,
        #[arg(long)]
        run_id: String,
        #[arg(long)]
        scripted: Option<PathBuf>,
    },
    /// Ask about the system itself; answers are grounded in the shipped
    /// design notes.
    Ask {
        question: String,
        /// Alternative grounding notes file.
        #[arg(long)]
        notes: Option<PathBuf>,
        #[arg(long)]
        scripted: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let globals = setup::Globals::resolve(
        cli.config,
        cli.store_root,
        cli.skills_dir,
        cli.porcelain,
    );
    let result = match cli.command {
        Command::Run {
            task_file,
            run_id,
            driver,
            image,
            container_bin,
            max_iterations,
            wall_time_limit,
            work_slice,
            scripted,
        } => commands::run(
            &globals,
            commands::RunArgs {
                task_file,
                run_id,
                driver,
                image,
                container_bin,
                max_iterations,
                wall_time_limit,
                work_slice,
                scripted,
            },
        ),
        Command::Validate { task_file } => commands::validate(&globals, &task_file),
        Command::Replay { task_file, run_id } => commands::replay(&globals, &task_file, &run_id),
        Command::ExportAudit {
            task_file,
            run_id,
            redact_env,
            output,
        } => commands::export_audit(&globals, &task_file, &run_id, &redact_env, output.as_deref()),
        Command::TaskMaker {
            text,
            output,
            scripted,
        } => ui_tools::task_maker(&globals, &text, output.as_deref(), scripted.as_deref()),
        Command::SkillMaker {
            task_file,
            run_id,
            scripted,
        } => ui_tools::skill_maker(&globals, &task_file, &run_id, scripted.as_deref()),
        Command::Ask {
            question,
            notes,
            scripted,
        } => ui_tools::ask(&globals, &question, notes.as_deref(), scripted.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
