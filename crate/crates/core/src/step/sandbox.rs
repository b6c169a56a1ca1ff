//! Script execution in a scratch directory with wall-clock and output caps.

use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);
pub const DEFAULT_MAX_OUTPUT: usize = 1 << 20;

// Runs main.py after replacing the socket class so that any connection
// attempt fails. Keeps the script's own line numbers in tracebacks.
const RUNNER: &str = r#"
import socket as _socket
class _NoNetwork(_socket.socket):
    def __init__(self, *args, **kwargs):
        raise OSError("network access is disabled in the sandbox")
def _no_network(*args, **kwargs):
    raise OSError("network access is disabled in the sandbox")
_socket.socket = _NoNetwork
_socket.create_connection = _no_network
_socket.getaddrinfo = _no_network
del _socket, _NoNetwork, _no_network
with open("main.py", encoding="utf-8") as _f:
    _src = _f.read()
exec(compile(_src, "main.py", "exec"), {"__name__": "__main__"})
"#;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxConfig {
    pub python: String,
    pub timeout: Duration,
    pub max_output: usize,
    /// Exposed read-only-by-convention as `data/` inside the scratch dir.
    pub data_dir: Option<PathBuf>,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            python: "python3".into(),
            timeout: DEFAULT_TIMEOUT,
            max_output: DEFAULT_MAX_OUTPUT,
            data_dir: None,
        }
    }
}

impl SandboxConfig {
    /// Defaults overridden by `AIDA_PYTHON`, `AIDA_SANDBOX_TIMEOUT_MS` and
    /// `AIDA_SANDBOX_MAX_OUTPUT`.
    pub fn from_env() -> Self {
        let mut c = Self::default();
        if let Ok(p) = std::env::var("AIDA_PYTHON") {
            if !p.is_empty() {
                c.python = p;
            }
        }
        if let Some(ms) = std::env::var("AIDA_SANDBOX_TIMEOUT_MS").ok().and_then(|v| v.parse().ok()) {
            c.timeout = Duration::from_millis(ms);
        }
        if let Some(n) = std::env::var("AIDA_SANDBOX_MAX_OUTPUT").ok().and_then(|v| v.parse().ok()) {
            c.max_output = n;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptOutput {
    pub stdout: String,
    pub stderr: String,
    pub exit_ok: bool,
    pub timed_out: bool,
    pub truncated: bool,
}

fn reader(mut pipe: impl Read + Send + 'static, cap: usize) -> std::thread::JoinHandle<(Vec<u8>, bool)> {
    std::thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        let mut truncated = false;
        loop {
            match pipe.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    if n > room {
                        truncated = true;
                    }
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        (kept, truncated)
    })
}

/// Runs `code` with an isolated interpreter. Returns `Err` only when the
/// interpreter could not be started.
pub fn run_script(code: &str, cfg: &SandboxConfig) -> std::io::Result<ScriptOutput> {
    let dir = tempfile::tempdir()?;
    std::fs::write(dir.path().join("main.py"), code)?;
    #[cfg(unix)]
    if let Some(data) = &cfg.data_dir {
        if let Ok(abs) = std::fs::canonicalize(data) {
            std::os::unix::fs::symlink(abs, dir.path().join("data"))?;
        }
    }
    let mut child = Command::new(&cfg.python)
        .arg("-I")
        .arg("-c")
        .arg(RUNNER)
        .current_dir(dir.path())
        .env_clear()
        .env("PATH", "/usr/local/bin:/usr/bin:/bin")
        .env("PYTHONDONTWRITEBYTECODE", "1")
        .env("PYTHONIOENCODING", "utf-8")
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?;
    let out = reader(child.stdout.take().expect("piped stdout"), cfg.max_output);
    let err = reader(child.stderr.take().expect("piped stderr"), cfg.max_output);

    let deadline = Instant::now() + cfg.timeout;
    let mut timed_out = false;
    let status = loop {
        if let Some(s) = child.try_wait()? {
            break Some(s);
        }
        if Instant::now() >= deadline {
            timed_out = true;
            let _ = child.kill();
            let _ = child.wait();
            break None;
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let (mut stdout, t1) = out.join().unwrap_or_default();
    let (mut stderr, t2) = err.join().unwrap_or_default();
    let mut truncated = t1 || t2;
    if stdout.len() + stderr.len() > cfg.max_output {
        truncated = true;
        stdout.truncate(cfg.max_output);
        stderr.truncate(cfg.max_output - stdout.len());
    }
    let mut stderr = String::from_utf8_lossy(&stderr).into_owned();
    if timed_out {
        stderr.push_str(&format!("\nscript killed after {} ms", cfg.timeout.as_millis()));
    }
    Ok(ScriptOutput {
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr,
        exit_ok: status.is_some_and(|s| s.success()),
        timed_out,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prints() {
        let o = run_script("print(1+1)", &SandboxConfig::default()).unwrap();
        assert_eq!(o.stdout.trim(), "2");
        assert!(o.exit_ok);
    }

    #[test]
    fn failing_script_reports_error() {
        let o = run_script("raise SystemExit(3)", &SandboxConfig::default()).unwrap();
        assert!(!o.exit_ok);
        let o = run_script("1/0", &SandboxConfig::default()).unwrap();
        assert!(o.stderr.contains("ZeroDivisionError"));
        assert!(o.stderr.contains("main.py"));
    }

    #[test]
    fn wall_clock_limit() {
        let cfg = SandboxConfig {
            timeout: Duration::from_millis(300),
            ..Default::default()
        };
        let o = run_script("import time\ntime.sleep(5)", &cfg).unwrap();
        assert!(o.timed_out && !o.exit_ok);
    }

    #[test]
    fn output_cap() {
        let cfg = SandboxConfig {
            max_output: 1000,
            ..Default::default()
        };
        let o = run_script("print('x' * 5000)", &cfg).unwrap();
        assert!(o.truncated);
        assert!(o.stdout.len() <= 1000);
    }

    #[test]
    fn no_network() {
        let o = run_script(
            "import socket\ntry:\n    socket.create_connection(('127.0.0.1', 9))\nexcept OSError as e:\n    print('blocked', e)",
            &SandboxConfig::default(),
        )
        .unwrap();
        assert!(o.stdout.contains("blocked"));
    }

    #[test]
    fn missing_interpreter_is_launch_error() {
        let cfg = SandboxConfig {
            python: "/nonexistent/python".into(),
            ..Default::default()
        };
        assert!(run_script("print(1)", &cfg).is_err());
    }
}
