//! Process-isolation fallback driver.
//!
//! Plain `sh -c` subprocesses with the working directory set to the task
//! folder and a deny-by-default environment. There is no filesystem or
//! network enforcement here; this driver exists so the engine and its tests
//! run on machines without a container runtime.

use std::io::Read;
use std::os::unix::process::CommandExt as _;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use super::{cap_stream, ExecResult, SandboxError, SandboxSpec, ENV_ALLOWLIST, OUTPUT_CAP_BYTES};

pub(crate) fn exec(
    spec: &SandboxSpec,
    command: &str,
    timeout: Duration,
) -> Result<ExecResult, SandboxError> {
    let mut cmd = Command::new("/bin/sh");
    cmd.arg("-c")
        .arg(command)
        .current_dir(&spec.working_dir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        // Own process group, so a timeout kill reaps descendants too and a
        // lingering grandchild cannot hold the output pipes open.
        .process_group(0)
        .env_clear();
    for var in ENV_ALLOWLIST {
        if let Ok(value) = std::env::var(var) {
            cmd.env(var, value);
        }
    }

    let started = Instant::now();
    let mut child = cmd
        .spawn()
        .map_err(|e| SandboxError::ExecFailed(format!("spawn: {e}")))?;

    let stdout_pipe = child.stdout.take().expect("stdout piped");
    let stderr_pipe = child.stderr.take().expect("stderr piped");
    let stdout_reader = spawn_capped_reader(stdout_pipe);
    let stderr_reader = spawn_capped_reader(stderr_pipe);

    let mut timed_out = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) => {
                if started.elapsed() >= timeout {
                    timed_out = true;
                    unsafe {
                        libc::kill(-(child.id() as i32), libc::SIGKILL);
                    }
                    let _ = child.wait();
                    break None;
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return Err(SandboxError::ExecFailed(format!("wait: {e}"))),
        }
    };

    let stdout = stdout_reader.join().unwrap_or_default();
    let stderr = stderr_reader.join().unwrap_or_default();
    let exit_code = match status {
        Some(status) => status.code().unwrap_or(-1),
        None => -1,
    };
    Ok(ExecResult {
        exit_code,
        stdout: cap_stream(&stdout),
        stderr: cap_stream(&stderr),
        duration_ms: started.elapsed().as_millis() as u64,
        timed_out,
    })
}

/// Read a pipe on its own thread, keeping at most the cap plus one byte so
/// the truncation marker logic can tell "exactly cap" from "over cap".
fn spawn_capped_reader<R: Read + Send + 'static>(
    mut pipe: R,
) -> std::thread::JoinHandle<Vec<u8>> {
    std::thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match pipe.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => {
                    if kept.len() <= OUTPUT_CAP_BYTES {
                        let room = OUTPUT_CAP_BYTES + 1 - kept.len();
                        kept.extend_from_slice(&buf[..n.min(room)]);
                    }
                    // Past the cap: keep draining so the child never blocks
                    // on a full pipe.
                }
                Err(_) => break,
            }
        }
        kept
    })
}
