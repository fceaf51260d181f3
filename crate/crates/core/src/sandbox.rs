//! Client side of the code-execution sandbox.
//!
//! Each Action runs in a fresh runner process. The runner reads one JSON
//! request record on stdin and writes one JSON report on stdout:
//!
//! ```text
//! -> {"source": "...", "timeout_ms": 1000, "memory_limit_mb": 1024, "stdout_cap_bytes": 65536}
//! <- {"status": "success" | "exception" | "timeout", "stdout": "...", "stderr": "...", "duration_ms": 12}
//! ```
//!
//! A non-zero runner exit, a spawn failure, or a report that does not parse
//! yields [`ExecStatus::SandboxError`], kept distinct from user-code failure.

use std::io::{Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_TIMEOUT_MS: u64 = 100;
pub const MAX_TIMEOUT_MS: u64 = 120_000;
/// Bytes of stderr kept in a failure observation.
pub const OBSERVATION_STDERR_TAIL: usize = 2048;
/// Extra time granted to the runner beyond the requested budget before the
/// client kills its process group.
const KILL_GRACE_MS: u64 = 250;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SandboxError {
    #[error("timeout_ms {0} outside [{MIN_TIMEOUT_MS}, {MAX_TIMEOUT_MS}]")]
    TimeoutOutOfRange(u64),
    #[error("{0} must be positive")]
    NonPositiveCap(&'static str),
    #[error("sandbox command is empty")]
    EmptyCommand,
    #[error("pool size must be positive")]
    EmptyPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Success,
    Exception,
    Timeout,
    SandboxError,
}

impl ExecStatus {
    /// The single success criterion for executed actions.
    pub fn is_success(self) -> bool {
        self == ExecStatus::Success
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRequest {
    pub source: String,
    pub timeout_ms: u64,
    pub memory_limit_mb: u64,
    pub stdout_cap_bytes: usize,
}

impl ExecutionRequest {
    pub fn new(source: impl Into<String>) -> Self {
        ExecutionRequest {
            source: source.into(),
            timeout_ms: 10_000,
            memory_limit_mb: 1024,
            stdout_cap_bytes: 64 * 1024,
        }
    }

    pub fn with_timeout_ms(mut self, timeout_ms: u64) -> Self {
        self.timeout_ms = timeout_ms;
        self
    }

    pub fn validate(&self) -> Result<(), SandboxError> {
        if !(MIN_TIMEOUT_MS..=MAX_TIMEOUT_MS).contains(&self.timeout_ms) {
            return Err(SandboxError::TimeoutOutOfRange(self.timeout_ms));
        }
        if self.memory_limit_mb == 0 {
            return Err(SandboxError::NonPositiveCap("memory_limit_mb"));
        }
        if self.stdout_cap_bytes == 0 {
            return Err(SandboxError::NonPositiveCap("stdout_cap_bytes"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecStatus,
    pub stdout: String,
    pub stderr: String,
    pub duration_ms: u64,
    /// Budget the execution ran under.
    #[serde(default)]
    pub timeout_ms: u64,
}

impl ExecutionResult {
    pub fn sandbox_error(message: impl Into<String>, duration_ms: u64, timeout_ms: u64) -> Self {
        ExecutionResult {
            status: ExecStatus::SandboxError,
            stdout: String::new(),
            stderr: message.into(),
            duration_ms,
            timeout_ms,
        }
    }
}

pub fn is_success(res: &ExecutionResult) -> bool {
    res.status.is_success()
}

/// Renders an execution result as Observation text.
pub fn format_observation(res: &ExecutionResult) -> String {
    let header = match res.status {
        ExecStatus::Success => return res.stdout.clone(),
        ExecStatus::Timeout => {
            let budget = if res.timeout_ms > 0 {
                res.timeout_ms
            } else {
                res.duration_ms
            };
            format!("[[execution timeout after {budget} ms]]")
        }
        ExecStatus::Exception => "[[execution error]]".to_string(),
        ExecStatus::SandboxError => "[[sandbox error]]".to_string(),
    };
    let tail = tail_bytes(&res.stderr, OBSERVATION_STDERR_TAIL);
    if tail.is_empty() {
        header
    } else {
        format!("{header}\n{tail}")
    }
}

fn tail_bytes(s: &str, n: usize) -> &str {
    if s.len() <= n {
        return s;
    }
    let mut start = s.len() - n;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    &s[start..]
}

/// Caps `s` at `cap` bytes, appending an explicit truncation marker.
pub fn cap_output(s: String, cap: usize) -> String {
    if s.len() <= cap {
        return s;
    }
    let mut end = cap;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    let dropped = s.len() - end;
    let mut out = s[..end].to_string();
    out.push_str(&format!("\n[[truncated {dropped} bytes]]"));
    out
}

pub trait Executor: Send + Sync {
    fn execute(&self, req: &ExecutionRequest) -> ExecutionResult;

    /// Request for `source` under this executor's default limits.
    fn request(&self, source: &str) -> ExecutionRequest {
        ExecutionRequest::new(source)
    }

    fn run_code(&self, source: &str) -> ExecutionResult {
        self.execute(&self.request(source))
    }
}

impl<E: Executor + ?Sized> Executor for &E {
    fn execute(&self, req: &ExecutionRequest) -> ExecutionResult {
        (**self).execute(req)
    }

    fn request(&self, source: &str) -> ExecutionRequest {
        (**self).request(source)
    }
}

/// Executor backed by a closure; handy for tests and offline replays.
pub struct FnExecutor<F>(pub F);

impl<F> Executor for FnExecutor<F>
where
    F: Fn(&ExecutionRequest) -> ExecutionResult + Send + Sync,
{
    fn execute(&self, req: &ExecutionRequest) -> ExecutionResult {
        (self.0)(req)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SandboxConfig {
    /// Runner command line: program followed by its arguments.
    pub cmd: Vec<String>,
    pub timeout_ms: u64,
    pub pool_size: usize,
    pub memory_limit_mb: u64,
    pub stdout_cap_bytes: usize,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            cmd: vec!["thor-runner".to_string()],
            timeout_ms: 10_000,
            pool_size: 4,
            memory_limit_mb: 1024,
            stdout_cap_bytes: 64 * 1024,
        }
    }
}

impl SandboxConfig {
    pub fn validate(&self) -> Result<(), SandboxError> {
        if self.cmd.is_empty() || self.cmd[0].is_empty() {
            return Err(SandboxError::EmptyCommand);
        }
        if self.pool_size == 0 {
            return Err(SandboxError::EmptyPool);
        }
        ExecutionRequest {
            source: String::new(),
            timeout_ms: self.timeout_ms,
            memory_limit_mb: self.memory_limit_mb,
            stdout_cap_bytes: self.stdout_cap_bytes,
        }
        .validate()
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Deserialize)]
struct RunnerReport {
    status: String,
    stdout: String,
    stderr: String,
    #[allow(dead_code)]
    duration_ms: u64,
}

/// Runs each request in a fresh runner subprocess, at most `pool_size` at a time.
pub struct SubprocessExecutor {
    config: SandboxConfig,
    permits: Semaphore,
}

impl SubprocessExecutor {
    pub fn new(config: SandboxConfig) -> Result<Self, SandboxError> {
        config.validate()?;
        let permits = Semaphore::new(config.pool_size);
        Ok(SubprocessExecutor { config, permits })
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    fn spawn(&self) -> std::io::Result<Child> {
        let mut cmd = Command::new(&self.config.cmd[0]);
        cmd.args(&self.config.cmd[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        #[cfg(unix)]
        {
            use std::os::unix::process::CommandExt;
            cmd.process_group(0);
        }
        cmd.spawn()
    }

    fn run(&self, req: &ExecutionRequest) -> ExecutionResult {
        let started = Instant::now();
        let elapsed_ms = |s: Instant| s.elapsed().as_millis() as u64;
        let mut child = match self.spawn() {
            Ok(c) => c,
            Err(e) => {
                return ExecutionResult::sandbox_error(
                    format!("failed to start runner {:?}: {e}", self.config.cmd[0]),
                    elapsed_ms(started),
                    req.timeout_ms,
                )
            }
        };
        let payload = serde_json::to_vec(req).expect("request serialization is infallible");
        let stdin_result = child
            .stdin
            .take()
            .map(|mut stdin| stdin.write_all(&payload))
            .unwrap_or(Ok(()));
        let out_reader = spawn_reader(child.stdout.take());
        let err_reader = spawn_reader(child.stderr.take());

        let deadline = Duration::from_millis(req.timeout_ms + KILL_GRACE_MS);
        let exit = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) if started.elapsed() >= deadline => break None,
                Ok(None) => thread::sleep(Duration::from_millis(2)),
                Err(_) => break None,
            }
        };
        if exit.is_none() {
            kill_group(&mut child);
        }
        let _ = child.wait();
        let runner_stdout = out_reader.join().unwrap_or_default();
        let runner_stderr = err_reader.join().unwrap_or_default();
        let duration_ms = elapsed_ms(started);

        let Some(exit) = exit else {
            return ExecutionResult {
                status: ExecStatus::Timeout,
                stdout: String::new(),
                stderr: String::new(),
                duration_ms,
                timeout_ms: req.timeout_ms,
            };
        };
        if let Err(e) = stdin_result {
            return ExecutionResult::sandbox_error(
                format!("failed to send request to runner: {e}"),
                duration_ms,
                req.timeout_ms,
            );
        }
        if !exit.success() {
            return ExecutionResult::sandbox_error(
                format!(
                    "runner exited with {exit}: {}",
                    String::from_utf8_lossy(&runner_stderr).trim()
                ),
                duration_ms,
                req.timeout_ms,
            );
        }
        let report: RunnerReport = match serde_json::from_slice(&runner_stdout) {
            Ok(r) => r,
            Err(e) => {
                return ExecutionResult::sandbox_error(
                    format!("malformed runner report: {e}"),
                    duration_ms,
                    req.timeout_ms,
                )
            }
        };
        let status = match report.status.as_str() {
            "success" => ExecStatus::Success,
            "exception" => ExecStatus::Exception,
            "timeout" => ExecStatus::Timeout,
            other => {
                return ExecutionResult::sandbox_error(
                    format!("runner reported unknown status {other:?}"),
                    duration_ms,
                    req.timeout_ms,
                )
            }
        };
        ExecutionResult {
            status,
            stdout: cap_output(report.stdout, req.stdout_cap_bytes),
            stderr: cap_output(report.stderr, req.stdout_cap_bytes),
            duration_ms,
            timeout_ms: req.timeout_ms,
        }
    }
}

impl Executor for SubprocessExecutor {
    fn execute(&self, req: &ExecutionRequest) -> ExecutionResult {
        if let Err(e) = req.validate() {
            return ExecutionResult::sandbox_error(
                format!("invalid request: {e}"),
                0,
                req.timeout_ms,
            );
        }
        let _permit = self.permits.acquire();
        self.run(req)
    }

    fn request(&self, source: &str) -> ExecutionRequest {
        ExecutionRequest {
            source: source.to_string(),
            timeout_ms: self.config.timeout_ms,
            memory_limit_mb: self.config.memory_limit_mb,
            stdout_cap_bytes: self.config.stdout_cap_bytes,
        }
    }
}

fn spawn_reader<R: Read + Send + 'static>(pipe: Option<R>) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut p) = pipe {
            let _ = p.read_to_end(&mut buf);
        }
        buf
    })
}

fn kill_group(child: &mut Child) {
    #[cfg(unix)]
    {
        let pgid = child.id() as libc::pid_t;
        // SAFETY: signalling our own child's process group.
        unsafe {
            libc::kill(-pgid, libc::SIGKILL);
        }
    }
    let _ = child.kill();
}
