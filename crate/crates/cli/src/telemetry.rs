//! Wall-time and peak-memory measurement.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub wall_seconds: f64,
    pub peak_rss_bytes: u64,
    pub parallelism: usize,
    pub jobs: Vec<JobTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTiming {
    pub job: String,
    pub wall_seconds: f64,
}

fn maxrss_bytes(usage: &libc::rusage) -> u64 {
    // Linux reports kilobytes, macOS bytes.
    let raw = usage.ru_maxrss.max(0) as u64;
    if cfg!(target_os = "macos") {
        raw
    } else {
        raw * 1024
    }
}

/// High-water resident set size of this process.
///
/// On Linux this is `VmHWM`, which starts afresh at `execve`; `ru_maxrss`
/// keeps the high-water mark of the image the process was spawned from.
pub fn peak_rss_bytes() -> u64 {
    if let Some(kb) = vm_hwm_kb() {
        return kb * 1024;
    }
    rusage_peak()
}

fn vm_hwm_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn rusage_peak() -> u64 {
    let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
    // SAFETY: `usage` is a valid out-pointer for the duration of the call.
    let rc = unsafe { libc::getrusage(libc::RUSAGE_SELF, &mut usage) };
    if rc == 0 {
        maxrss_bytes(&usage)
    } else {
        0
    }
}

/// Reaps child `pid` and returns its exit status and peak RSS as seen by the
/// kernel. The peak includes the parent's high-water mark at spawn time.
pub fn wait_child(pid: u32) -> std::io::Result<(i32, u64)> {
    let mut status: libc::c_int = 0;
    let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
    loop {
        // SAFETY: both out-pointers are valid; `pid` is our own unreaped child.
        let rc = unsafe { libc::wait4(pid as libc::pid_t, &mut status, 0, &mut usage) };
        if rc == pid as libc::pid_t {
            break;
        }
        let err = std::io::Error::last_os_error();
        if err.kind() != std::io::ErrorKind::Interrupted {
            return Err(err);
        }
    }
    let code = if libc::WIFEXITED(status) {
        libc::WEXITSTATUS(status)
    } else {
        -1
    };
    Ok((code, maxrss_bytes(&usage)))
}
