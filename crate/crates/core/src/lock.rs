//! Advisory file locks for cross-process store access.
//!
//! Memory files are shared between concurrent task runs (group and global
//! scope), so every read-modify-write cycle and every history/audit append
//! takes an exclusive `flock(2)` on a `.lock` sidecar next to the target
//! file. The lock is released when the guard drops.

use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::io::AsRawFd;
use std::path::Path;

/// Exclusive advisory lock, held for the lifetime of the guard.
#[derive(Debug)]
pub struct FileLock {
    file: File,
}

impl FileLock {
    /// Acquire an exclusive lock on the sidecar for `target`, blocking until
    /// available. Creates parent directories and the sidecar as needed.
    pub fn exclusive(target: &Path) -> io::Result<FileLock> {
        let sidecar = sidecar_path(target);
        if let Some(parent) = sidecar.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&sidecar)?;
        let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX) };
        if rc != 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(FileLock { file })
    }
}

impl Drop for FileLock {
    fn drop(&mut self) {
        unsafe {
            libc::flock(self.file.as_raw_fd(), libc::LOCK_UN);
        }
    }
}

fn sidecar_path(target: &Path) -> std::path::PathBuf {
    let mut name = target
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "store".into());
    name.push(".lock");
    target.with_file_name(name)
}
