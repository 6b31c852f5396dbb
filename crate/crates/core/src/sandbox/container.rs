//! Container driver: drives an external container binary through the
//! documented instance contract.
//!
//! Argument order (verbatim contract, `apptainer`-compatible):
//!
//! ```text
//! <binary> instance start --containall
//!          [--net --network none]            when network is off
//!          [--nv]                            when gpu is requested
//!          --bind <host>:<guest>[:ro]        one per mount, spec order
//!          --pwd <working-dir>
//!          <image> <instance-name>
//! <binary> exec --pwd <working-dir> instance://<name> /bin/sh -c <command>
//! <binary> instance stop <instance-name>
//! ```

use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use super::{cap_stream, ExecResult, SandboxError, SandboxSpec};
use crate::sam::MountMode;

/// Argv for `instance start` (without the leading binary).
pub fn build_start_args(spec: &SandboxSpec, image: &Path, instance: &str) -> Vec<String> {
    let mut args = vec![
        "instance".to_string(),
        "start".to_string(),
        "--containall".to_string(),
    ];
    if !spec.network {
        args.push("--net".to_string());
        args.push("--network".to_string());
        args.push("none".to_string());
    }
    if spec.gpu {
        args.push("--nv".to_string());
    }
    for mount in &spec.mounts {
        let mut bind = format!("{}:{}", mount.host_path.display(), mount.guest_path.display());
        if mount.mode == MountMode::ReadOnly {
            bind.push_str(":ro");
        }
        args.push("--bind".to_string());
        args.push(bind);
    }
    args.push("--pwd".to_string());
    args.push(spec.working_dir.display().to_string());
    args.push(image.display().to_string());
    args.push(instance.to_string());
    args
}

/// Argv for `exec` (without the leading binary).
pub fn build_exec_args(spec: &SandboxSpec, instance: &str, command: &str) -> Vec<String> {
    vec![
        "exec".to_string(),
        "--pwd".to_string(),
        spec.working_dir.display().to_string(),
        format!("instance://{instance}"),
        "/bin/sh".to_string(),
        "-c".to_string(),
        command.to_string(),
    ]
}

/// Argv for `instance stop` (without the leading binary).
pub fn build_stop_args(instance: &str) -> Vec<String> {
    vec![
        "instance".to_string(),
        "stop".to_string(),
        instance.to_string(),
    ]
}

pub(crate) fn start_instance(
    binary: &str,
    image: &Path,
    spec: &SandboxSpec,
) -> Result<String, SandboxError> {
    if !image.exists() {
        return Err(SandboxError::ImageMissing(image.to_path_buf()));
    }
    let instance = format!("scifi-{}", std::process::id());
    let args = build_start_args(spec, image, &instance);
    let output = Command::new(binary)
        .args(&args)
        .stdin(Stdio::null())
        .output()
        .map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                SandboxError::RuntimeUnavailable(format!("{binary}: not found on PATH"))
            } else {
                SandboxError::StartFailed(format!("{binary}: {e}"))
            }
        })?;
    if !output.status.success() {
        return Err(SandboxError::StartFailed(format!(
            "{binary} instance start exited {}: {}",
            output.status.code().unwrap_or(-1),
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }
    Ok(instance)
}

pub(crate) fn exec(
    binary: &str,
    instance: &str,
    spec: &SandboxSpec,
    command: &str,
    timeout: Duration,
) -> Result<ExecResult, SandboxError> {
    let args = build_exec_args(spec, instance, command);
    let started = Instant::now();
    let mut child = {
        use std::os::unix::process::CommandExt as _;
        Command::new(binary)
            .args(&args)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0)
            .spawn()
            .map_err(|e| SandboxError::ExecFailed(format!("spawn {binary}: {e}")))?
    };

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

    let mut stdout = Vec::new();
    let mut stderr = Vec::new();
    if let Some(mut pipe) = child.stdout.take() {
        use std::io::Read;
        let _ = pipe.read_to_end(&mut stdout);
    }
    if let Some(mut pipe) = child.stderr.take() {
        use std::io::Read;
        let _ = pipe.read_to_end(&mut stderr);
    }
    Ok(ExecResult {
        exit_code: status.map(|s| s.code().unwrap_or(-1)).unwrap_or(-1),
        stdout: cap_stream(&stdout),
        stderr: cap_stream(&stderr),
        duration_ms: started.elapsed().as_millis() as u64,
        timed_out,
    })
}

pub(crate) fn stop_instance(binary: &str, instance: &str) {
    let _ = Command::new(binary)
        .args(build_stop_args(instance))
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status();
}
