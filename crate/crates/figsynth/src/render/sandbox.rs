//! Subprocess execution under per-job limits.

use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use wait_timeout::ChildExt;

pub(super) struct ExecResult {
    pub exit_ok: bool,
    pub timed_out: bool,
    pub log: String,
    pub wall_ms: u64,
    /// Spawn failed because the binary is missing or not executable.
    pub setup_error: Option<String>,
}

/// Run `program args...` inside `workdir` with a wall-clock timeout, an
/// address-space cap, and (best effort) an unshared network namespace.
/// HOME, TMPDIR and tool cache dirs are pointed into the workdir so the
/// child cannot scribble outside it.
pub(super) fn run_limited(
    program: &str,
    args: &[&str],
    workdir: &Path,
    timeout: Duration,
    memory_limit_mb: u64,
    isolate_network: bool,
    log_cap_bytes: usize,
) -> ExecResult {
    let started = Instant::now();
    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(workdir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .env("HOME", workdir)
        .env("TMPDIR", workdir)
        .env("MPLBACKEND", "Agg")
        .env("MPLCONFIGDIR", workdir.join(".mplconfig"))
        .env("TEXMFVAR", workdir.join(".texmf-var"))
        .env("TEXMFHOME", workdir.join(".texmf-home"));

    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        let bytes = memory_limit_mb.saturating_mul(1024 * 1024);
        unsafe {
            cmd.pre_exec(move || {
                if bytes > 0 {
                    let limit = libc::rlimit {
                        rlim_cur: bytes,
                        rlim_max: bytes,
                    };
                    libc::setrlimit(libc::RLIMIT_AS, &limit);
                }
                if isolate_network {
                    // Needs CAP_SYS_ADMIN; silently degrades without it.
                    libc::unshare(libc::CLONE_NEWNET);
                }
                Ok(())
            });
        }
    }

    let mut child = match cmd.spawn() {
        Ok(child) => child,
        Err(e) => {
            return ExecResult {
                exit_ok: false,
                timed_out: false,
                log: String::new(),
                wall_ms: started.elapsed().as_millis() as u64,
                setup_error: Some(format!("cannot spawn {program}: {e}")),
            }
        }
    };

    let status = match child.wait_timeout(timeout).unwrap_or(None) {
        Some(status) => Some(status),
        None => {
            let _ = child.kill();
            let _ = child.wait();
            None
        }
    };
    let wall_ms = started.elapsed().as_millis() as u64;

    let mut log = String::new();
    if let Some(mut out) = child.stdout.take() {
        use std::io::Read;
        let mut buf = String::new();
        let _ = out.read_to_string(&mut buf);
        log.push_str(&buf);
    }
    if let Some(mut err) = child.stderr.take() {
        use std::io::Read;
        let mut buf = String::new();
        let _ = err.read_to_string(&mut buf);
        if !buf.is_empty() {
            log.push_str("\n--- stderr ---\n");
            log.push_str(&buf);
        }
    }
    truncate_log(&mut log, log_cap_bytes);

    ExecResult {
        exit_ok: status.is_some_and(|s| s.success()),
        timed_out: status.is_none(),
        log,
        wall_ms,
        setup_error: None,
    }
}

fn truncate_log(log: &mut String, cap: usize) {
    if log.len() > cap {
        let mut cut = cap;
        while cut > 0 && !log.is_char_boundary(cut) {
            cut -= 1;
        }
        log.truncate(cut);
        log.push_str("\n[log truncated]");
    }
}
