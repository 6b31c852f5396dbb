//! Isolated execution of work-phase tool commands.
//!
//! Resource mapping is default-deny and resolved once, before the agent loop
//! starts: the sandbox sees the task folder (read-write) plus exactly the
//! mounts declared in task metadata, nothing else. Two drivers exist:
//!
//! - the container driver shells out to an external container binary
//!   (`apptainer` by default) through the documented instance
//!   start/exec/stop contract and is the production path;
//! - the process driver runs commands as plain subprocesses jailed to the
//!   working directory by convention only. It exists so unit tests run on
//!   machines without a container runtime and is NOT a security boundary.
//!
//! Output capture is capped per stream; overruns are killed and flagged.

mod container;
mod process;

pub use container::{build_exec_args, build_start_args, build_stop_args};

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sam::{MountMode, MountSpec, TaskMetadata};

/// Capture cap per stream; longer output is cut and marked.
pub const OUTPUT_CAP_BYTES: usize = 64 * 1024;

/// Marker appended to a stream that hit the cap.
pub const TRUNCATION_MARKER: &str = "\n[output truncated at 65536 bytes]";

/// Environment variables passed through to sandboxed commands. Everything
/// else is dropped (deny by default).
pub const ENV_ALLOWLIST: &[&str] = &["PATH", "HOME", "LANG", "LC_ALL", "TERM", "USER"];

/// Resolved resource mapping for one run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxSpec {
    /// Container image reference; unused by the process driver.
    pub image: Option<PathBuf>,
    /// Bind mounts. Always includes the task folder read-write; every other
    /// entry traces to an explicit metadata mount.
    pub mounts: Vec<MountSpec>,
    pub network: bool,
    pub gpu: bool,
    pub working_dir: PathBuf,
    /// Soft CPU-seconds ceiling per exec, when the driver supports one.
    pub cpu_limit_secs: Option<u64>,
    /// Memory ceiling in MiB, when the driver supports one.
    pub memory_limit_mb: Option<u64>,
}

#[derive(Debug, Error)]
pub enum ResolveError {
    #[error("mount source does not exist: {0}")]
    MountSourceMissing(PathBuf),
    #[error("two mounts target the same guest path: {0}")]
    ConflictingGuestPath(PathBuf),
    #[error("task folder does not exist: {0}")]
    TaskFolderMissing(PathBuf),
}

/// Turn parsed metadata into the sandbox spec. Pure apart from existence
/// checks; called exactly once per run, before any model call.
pub fn resolve_resources(
    metadata: &TaskMetadata,
    task_folder: &Path,
) -> Result<SandboxSpec, ResolveError> {
    if !task_folder.is_dir() {
        return Err(ResolveError::TaskFolderMissing(task_folder.to_path_buf()));
    }
    let mut mounts = vec![MountSpec {
        host_path: task_folder.to_path_buf(),
        guest_path: task_folder.to_path_buf(),
        mode: MountMode::ReadWrite,
    }];
    for mount in &metadata.mounts {
        if !mount.host_path.exists() {
            return Err(ResolveError::MountSourceMissing(mount.host_path.clone()));
        }
        mounts.push(mount.clone());
    }
    let mut guests: Vec<&PathBuf> = mounts.iter().map(|m| &m.guest_path).collect();
    guests.sort();
    for pair in guests.windows(2) {
        if pair[0] == pair[1] {
            return Err(ResolveError::ConflictingGuestPath((*pair[0]).clone()));
        }
    }
    Ok(SandboxSpec {
        image: None,
        mounts,
        network: metadata.network,
        gpu: metadata.gpu,
        working_dir: task_folder.to_path_buf(),
        cpu_limit_secs: None,
        memory_limit_mb: None,
    })
}

/// Result of one command execution inside the sandbox.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecResult {
    /// Exit code; forced termination reports -1 with `timed_out` set.
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub duration_ms: u64,
    pub timed_out: bool,
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("container runtime unavailable: {0}; install it or run with the process driver")]
    RuntimeUnavailable(String),
    #[error("container image missing: {0}")]
    ImageMissing(PathBuf),
    #[error("sandbox start failed: {0}")]
    StartFailed(String),
    #[error("sandbox handle already torn down")]
    HandleClosed,
    #[error("exec failed: {0}")]
    ExecFailed(String),
}

/// Which isolation backend to use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SandboxDriver {
    /// Subprocess in the working directory. Non-secure; tests only.
    Process,
    /// External container binary (instance start/exec/stop contract).
    Container { binary: String, image: PathBuf },
}

#[derive(Debug)]
enum Runtime {
    Process,
    Container { binary: String, instance: String },
    Closed,
}

/// A live sandbox. Exec calls are serialized per handle; teardown is
/// idempotent and runs on drop as a backstop.
#[derive(Debug)]
pub struct SandboxHandle {
    spec: SandboxSpec,
    runtime: Runtime,
}

impl SandboxHandle {
    /// Start a sandbox instance for the spec with the chosen driver.
    pub fn start(driver: &SandboxDriver, spec: &SandboxSpec) -> Result<SandboxHandle, SandboxError> {
        match driver {
            SandboxDriver::Process => {
                if !spec.working_dir.is_dir() {
                    return Err(SandboxError::StartFailed(format!(
                        "working dir missing: {}",
                        spec.working_dir.display()
                    )));
                }
                Ok(SandboxHandle {
                    spec: spec.clone(),
                    runtime: Runtime::Process,
                })
            }
            SandboxDriver::Container { binary, image } => {
                let mut spec = spec.clone();
                spec.image = Some(image.clone());
                let instance = container::start_instance(binary, image, &spec)?;
                Ok(SandboxHandle {
                    spec,
                    runtime: Runtime::Container {
                        binary: binary.clone(),
                        instance,
                    },
                })
            }
        }
    }

    pub fn spec(&self) -> &SandboxSpec {
        &self.spec
    }

    /// Run a command under the spec's permissions. Overruns are killed and
    /// flagged `timed_out`.
    pub fn exec(&mut self, command: &str, timeout: Duration) -> Result<ExecResult, SandboxError> {
        match &self.runtime {
            Runtime::Closed => Err(SandboxError::HandleClosed),
            Runtime::Process => process::exec(&self.spec, command, timeout),
            Runtime::Container { binary, instance } => {
                container::exec(binary, instance, &self.spec, command, timeout)
            }
        }
    }

    /// Stop the instance. Safe to call more than once; errors are swallowed
    /// (best effort) because teardown runs on already-failed paths.
    pub fn teardown(&mut self) {
        if let Runtime::Container { binary, instance } = &self.runtime {
            container::stop_instance(binary, instance);
        }
        self.runtime = Runtime::Closed;
    }
}

impl Drop for SandboxHandle {
    fn drop(&mut self) {
        self.teardown();
    }
}

/// What the engine needs from a tool execution: the text fed back to the
/// model plus the numbers that drive slice accounting. Live runs format it
/// from an [`ExecResult`]; replay reconstructs it from the recorded text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolOutcome {
    pub content: String,
    pub exit_code: i32,
    pub duration_ms: u64,
    pub timed_out: bool,
}

/// Executes shell tool calls for the engine. Implemented by the sandbox and
/// by the replay runner; the call id is what lets replay find the recorded
/// result (the sandbox ignores it).
pub trait ToolRunner: Send {
    fn run_shell(
        &mut self,
        call_id: &str,
        command: &str,
        timeout: Duration,
    ) -> Result<ToolOutcome, SandboxError>;
}

impl ToolRunner for SandboxHandle {
    fn run_shell(
        &mut self,
        _call_id: &str,
        command: &str,
        timeout: Duration,
    ) -> Result<ToolOutcome, SandboxError> {
        let result = self.exec(command, timeout)?;
        Ok(ToolOutcome {
            content: format_exec_result(&result),
            exit_code: result.exit_code,
            duration_ms: result.duration_ms,
            timed_out: result.timed_out,
        })
    }
}

/// Fixed tool-result text format. The header lines are machine-parseable so
/// replay can recover the accounting numbers from the recorded content.
pub fn format_exec_result(result: &ExecResult) -> String {
    format!(
        "exit: {}\ntimed_out: {}\nduration_ms: {}\nstdout:\n{}\nstderr:\n{}",
        result.exit_code, result.timed_out, result.duration_ms, result.stdout, result.stderr
    )
}

/// Parse the header lines of a formatted tool result back into the
/// accounting numbers. Returns `None` when the text is not in the fixed
/// format (a replay of a hand-edited record).
pub fn parse_outcome_header(content: &str) -> Option<(i32, bool, u64)> {
    let mut lines = content.lines();
    let exit = lines.next()?.strip_prefix("exit: ")?.parse().ok()?;
    let timed_out = lines.next()?.strip_prefix("timed_out: ")?.parse().ok()?;
    let duration = lines.next()?.strip_prefix("duration_ms: ")?.parse().ok()?;
    Some((exit, timed_out, duration))
}

/// Cap a captured stream at [`OUTPUT_CAP_BYTES`], marking the cut.
pub(crate) fn cap_stream(bytes: &[u8]) -> String {
    if bytes.len() <= OUTPUT_CAP_BYTES {
        return String::from_utf8_lossy(bytes).into_owned();
    }
    let mut cut = OUTPUT_CAP_BYTES;
    while cut > 0 && !bytes.is_char_boundary_lossy(cut) {
        cut -= 1;
    }
    let mut out = String::from_utf8_lossy(&bytes[..cut]).into_owned();
    out.push_str(TRUNCATION_MARKER);
    out
}

trait CharBoundaryLossy {
    fn is_char_boundary_lossy(&self, idx: usize) -> bool;
}

impl CharBoundaryLossy for [u8] {
    fn is_char_boundary_lossy(&self, idx: usize) -> bool {
        if idx == 0 || idx >= self.len() {
            return true;
        }
        // UTF-8 continuation bytes are 0b10xxxxxx.
        self[idx] & 0xC0 != 0x80
    }
}
