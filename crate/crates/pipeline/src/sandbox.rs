//! Client side of the sandbox protocol, plus an in-memory fixture.
//!
//! The runner is a child process speaking line-delimited JSON: it first
//! writes a handshake `{"protocol": 1, "sdk_version": ...}`, then answers each
//! [`ExecRequest`] line with one [`ExecResponse`] line carrying the same id.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::syntax::{parse_module, Node};
use crate::task::TaskRecord;

pub const PROTOCOL_VERSION: u32 = 1;

/// Environment variable naming the runner command.
pub const SANDBOX_CMD_ENV: &str = "QSF_SANDBOX_CMD";

/// Longest `detail` a runner may send.
pub const MAX_DETAIL_BYTES: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecRequest {
    pub id: String,
    pub code: String,
    pub test: String,
    pub entry_point: String,
    pub timeout_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecStatus {
    Pass,
    Fail,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecResponse {
    pub id: String,
    pub status: ExecStatus,
    pub assertions_passed: u32,
    pub assertions_total: u32,
    pub duration_ms: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: u32,
    pub sdk_version: String,
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("sandbox unreachable: {0}")]
    Unreachable(String),
    #[error("sandbox protocol violation: {0}")]
    Protocol(String),
}

/// Executes candidate code against a test suite.
pub trait Sandbox: Sync {
    fn execute(&self, request: &ExecRequest) -> Result<ExecResponse, SandboxError>;

    /// Version string from the handshake.
    fn sdk_version(&self) -> &str;
}

/// The runner command from `flag`, falling back to `QSF_SANDBOX_CMD`.
pub fn sandbox_command(flag: Option<&str>) -> Option<String> {
    flag.map(str::to_string)
        .or_else(|| std::env::var(SANDBOX_CMD_ENV).ok())
        .filter(|c| !c.trim().is_empty())
}

fn truncate_detail(mut s: String) -> String {
    if s.len() > MAX_DETAIL_BYTES {
        let mut cut = MAX_DETAIL_BYTES;
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        s.truncate(cut);
    }
    s
}

type Pending = Arc<Mutex<HashMap<u64, Sender<ExecResponse>>>>;

/// A runner child process. Requests may be issued from several threads; each
/// gets a private wire id and waits for its own response.
pub struct ProcessSandbox {
    child: Mutex<Child>,
    stdin: Mutex<ChildStdin>,
    pending: Pending,
    next_id: AtomicU64,
    sdk_version: String,
    /// Extra wait beyond a request's own timeout before giving up on it.
    grace: Duration,
}

impl ProcessSandbox {
    /// Starts `command` through `sh -c` and reads its handshake.
    pub fn spawn(command: &str) -> Result<Self, SandboxError> {
        Self::spawn_with(command, Duration::from_secs(30), Duration::from_secs(5))
    }

    pub fn spawn_with(command: &str, handshake_timeout: Duration, grace: Duration) -> Result<Self, SandboxError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| SandboxError::Unreachable(format!("cannot start `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let pending: Pending = Arc::default();
        let (hs_tx, hs_rx) = mpsc::channel::<Result<Handshake, String>>();

        let table = Arc::clone(&pending);
        thread::spawn(move || {
            let mut lines = BufReader::new(stdout).lines();
            let first = match lines.next() {
                Some(Ok(line)) => serde_json::from_str::<Handshake>(&line).map_err(|e| format!("bad handshake `{line}`: {e}")),
                Some(Err(e)) => Err(e.to_string()),
                None => Err("runner closed its output before the handshake".into()),
            };
            let ok = first.is_ok();
            let _ = hs_tx.send(first);
            if !ok {
                return;
            }
            for line in lines {
                let Ok(line) = line else { break };
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<ExecResponse>(&line) {
                    Ok(resp) => {
                        let waiter = resp.id.parse::<u64>().ok().and_then(|id| table.lock().unwrap().remove(&id));
                        match waiter {
                            Some(tx) => {
                                let _ = tx.send(resp);
                            }
                            None => log::warn!("sandbox response for unknown id `{}`", resp.id),
                        }
                    }
                    Err(e) => log::warn!("unparseable sandbox line `{line}`: {e}"),
                }
            }
            // dropping the senders wakes every waiter with a disconnect
            table.lock().unwrap().clear();
        });

        let handshake = match hs_rx.recv_timeout(handshake_timeout) {
            Ok(Ok(h)) => h,
            Ok(Err(msg)) => {
                let _ = child.kill();
                return Err(SandboxError::Protocol(msg));
            }
            Err(_) => {
                let _ = child.kill();
                return Err(SandboxError::Unreachable("no handshake from runner".into()));
            }
        };
        if handshake.protocol != PROTOCOL_VERSION {
            let _ = child.kill();
            return Err(SandboxError::Protocol(format!(
                "runner speaks protocol {}, expected {PROTOCOL_VERSION}",
                handshake.protocol
            )));
        }
        log::info!("sandbox ready, sdk_version {}", handshake.sdk_version);
        Ok(Self {
            child: Mutex::new(child),
            stdin: Mutex::new(stdin),
            pending,
            next_id: AtomicU64::new(0),
            sdk_version: handshake.sdk_version,
            grace,
        })
    }
}

impl Sandbox for ProcessSandbox {
    fn execute(&self, request: &ExecRequest) -> Result<ExecResponse, SandboxError> {
        let wire = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        self.pending.lock().unwrap().insert(wire, tx);
        let line = serde_json::to_string(&ExecRequest { id: wire.to_string(), ..request.clone() })
            .map_err(|e| SandboxError::Protocol(e.to_string()))?;
        {
            let mut stdin = self.stdin.lock().unwrap();
            if let Err(e) = stdin.write_all(line.as_bytes()).and_then(|_| stdin.write_all(b"\n")).and_then(|_| stdin.flush()) {
                self.pending.lock().unwrap().remove(&wire);
                return Err(SandboxError::Unreachable(format!("write failed: {e}")));
            }
        }
        let wait = Duration::from_secs_f64(request.timeout_s.max(0.0)) + self.grace;
        match rx.recv_timeout(wait) {
            Ok(mut resp) => {
                resp.id = request.id.clone();
                resp.detail = truncate_detail(resp.detail);
                Ok(resp)
            }
            Err(RecvTimeoutError::Timeout) => {
                self.pending.lock().unwrap().remove(&wire);
                Err(SandboxError::Unreachable(format!("no response within {:.1}s", wait.as_secs_f64())))
            }
            Err(RecvTimeoutError::Disconnected) => Err(SandboxError::Unreachable("runner exited".into())),
        }
    }

    fn sdk_version(&self) -> &str {
        &self.sdk_version
    }
}

impl Drop for ProcessSandbox {
    fn drop(&mut self) {
        if let Ok(child) = self.child.get_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

struct Reference {
    entry_point: String,
    statements: Vec<String>,
    total: u32,
}

/// Deterministic stand-in for the runner.
///
/// Each test suite is registered with its reference solution. A candidate
/// passes when its entry function is statement-for-statement identical to the
/// reference (layout, comments and docstrings ignored). Otherwise it fails,
/// and the share of reference statements it reproduces in order sets
/// `assertions_passed`. `assertions_total` is the number of top-level
/// `test_*`/`check` functions in the suite.
///
/// Static checks run first: unparseable code or a missing entry point is an
/// error, a `while True` loop with no `break` is a timeout, and calls to
/// `os.abort`, `os._exit` or `sys.exit` are crashes.
pub struct FixtureSandbox {
    references: HashMap<String, Reference>,
    sdk_version: String,
}

impl Default for FixtureSandbox {
    fn default() -> Self {
        Self {
            references: HashMap::new(),
            sdk_version: "fixture".into(),
        }
    }
}

fn function_statements(code: &str, entry_point: &str) -> Result<Option<(Vec<String>, Node)>, String> {
    let module = parse_module(code, "<candidate>").map_err(|e| format!("SyntaxError: {}", e.message))?;
    Ok(module.function(entry_point).map(|f| {
        let f = f.without_docstring();
        (f.body().iter().map(Node::shape).collect(), f)
    }))
}

fn count_tests(test: &str) -> Result<u32, String> {
    let module = parse_module(test, "<test>").map_err(|e| format!("SyntaxError in test: {}", e.message))?;
    let n = module
        .functions()
        .filter(|f| f.label.as_deref().is_some_and(|n| n.starts_with("test") || n == "check"))
        .count();
    Ok(n.max(1) as u32)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

fn spins_forever(f: &Node) -> bool {
    f.walk().any(|n| {
        n.kind == "While"
            && n.children.first().is_some_and(|t| {
                t.kind == "Constant" && matches!(t.label.as_deref(), Some("Bool(true)") | Some("Int(1)"))
            })
            && !n.body().iter().any(|s| s.walk().any(|x| x.kind == "Break" || x.kind == "Return"))
    })
}

fn crashes(f: &Node) -> bool {
    f.walk().any(|n| {
        n.kind == "Attribute"
            && matches!(n.label.as_deref(), Some("abort" | "_exit" | "exit"))
            && n.children.first().is_some_and(|m| matches!(m.label.as_deref(), Some("os" | "sys")))
    })
}

impl FixtureSandbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_sdk_version(mut self, version: impl Into<String>) -> Self {
        self.sdk_version = version.into();
        self
    }

    /// Registers `solution` as the reference for `test`.
    pub fn register(&mut self, test: &str, solution: &str, entry_point: &str) -> Result<(), String> {
        let total = count_tests(test)?;
        let (statements, _) = function_statements(solution, entry_point)?
            .ok_or_else(|| format!("reference does not define `{entry_point}`"))?;
        self.references.insert(
            test.to_string(),
            Reference { entry_point: entry_point.to_string(), statements, total },
        );
        Ok(())
    }

    /// Registers every task's canonical solution; unusable tasks are logged
    /// and skipped.
    pub fn from_tasks<'a>(tasks: impl IntoIterator<Item = &'a TaskRecord>) -> Self {
        let mut s = Self::new();
        for t in tasks {
            if let Err(e) = s.register(&t.test, &t.canonical_solution, &t.entry_point) {
                log::warn!("fixture sandbox: skipping {}: {e}", t.task_id);
            }
        }
        s
    }

    pub fn len(&self) -> usize {
        self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }

    fn judge(&self, req: &ExecRequest) -> (ExecStatus, u32, u32, u64, String) {
        let budget_ms = (req.timeout_s * 1000.0).max(0.0) as u64;
        let (statements, f) = match function_statements(&req.code, &req.entry_point) {
            Err(e) => return (ExecStatus::Error, 0, 0, 1, e),
            Ok(None) => {
                return (ExecStatus::Error, 0, 0, 1, format!("NameError: name '{}' is not defined", req.entry_point))
            }
            Ok(Some(found)) => found,
        };
        let cost = (5 + 2 * statements.len() as u64).min(budget_ms);
        if spins_forever(&f) {
            return (ExecStatus::Timeout, 0, 0, budget_ms, format!("exceeded {}s", req.timeout_s));
        }
        if crashes(&f) {
            return (ExecStatus::Error, 0, 0, cost, "process terminated abnormally".into());
        }
        let Some(reference) = self.references.get(&req.test) else {
            return (ExecStatus::Error, 0, 0, cost, "no reference registered for this test suite".into());
        };
        if reference.entry_point != req.entry_point {
            return (ExecStatus::Error, 0, 0, cost, format!("test suite expects `{}`", reference.entry_point));
        }
        let total = reference.total;
        if statements == reference.statements {
            return (ExecStatus::Pass, total, total, cost, String::new());
        }
        let matched = lcs(&statements, &reference.statements) as u64;
        let share = (u64::from(total) * matched / reference.statements.len().max(1) as u64) as u32;
        let passed = share.min(total - 1);
        (ExecStatus::Fail, passed, total, cost, format!("AssertionError: {passed}/{total} tests passed"))
    }
}

impl Sandbox for FixtureSandbox {
    fn execute(&self, req: &ExecRequest) -> Result<ExecResponse, SandboxError> {
        let (status, assertions_passed, assertions_total, duration_ms, detail) = self.judge(req);
        Ok(ExecResponse {
            id: req.id.clone(),
            status,
            assertions_passed,
            assertions_total,
            duration_ms,
            detail: truncate_detail(detail),
        })
    }

    fn sdk_version(&self) -> &str {
        &self.sdk_version
    }
}

/// Runs the runner side of the protocol over `input`/`output` until end of
/// input, answering with `sandbox`. Malformed lines get an `error` response.
pub fn serve<S: Sandbox + ?Sized, R: BufRead, W: Write>(sandbox: &S, input: R, mut output: W) -> std::io::Result<()> {
    let hs = Handshake { protocol: PROTOCOL_VERSION, sdk_version: sandbox.sdk_version().to_string() };
    writeln!(output, "{}", serde_json::to_string(&hs)?)?;
    output.flush()?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<ExecRequest>(&line) {
            Ok(req) => sandbox.execute(&req).unwrap_or_else(|e| error_response(&req.id, e.to_string())),
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(str::to_string))
                    .unwrap_or_default();
                error_response(&id, format!("malformed request: {e}"))
            }
        };
        writeln!(output, "{}", serde_json::to_string(&resp)?)?;
        output.flush()?;
    }
    Ok(())
}

fn error_response(id: &str, detail: String) -> ExecResponse {
    ExecResponse {
        id: id.to_string(),
        status: ExecStatus::Error,
        assertions_passed: 0,
        assertions_total: 0,
        duration_ms: 0,
        detail: truncate_detail(detail),
    }
}
