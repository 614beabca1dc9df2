//! Process-level sandbox for candidate programs.
//!
//! Every execution gets a fresh scratch directory containing `main.py` (the
//! candidate source), which is also the working directory, `HOME` and
//! `TMPDIR` of the child. The child runs in its own session so the whole
//! process group can be killed, under `setrlimit` caps for address space,
//! CPU seconds, file size, open files and core dumps, and (when the kernel
//! allows it) in a private network namespace with no interfaces.
//!
//! For the default Python interpreter a small guard prelude installs an audit
//! hook that rejects sockets, subprocesses and filesystem writes outside the
//! scratch directory before handing control to `main.py`.
//!
//! Setting `SANDBOX_DEBUG` to a non-empty value dumps every raw execution to
//! standard error.

use std::fs;
use std::io::{self, Read, Write};
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::model::{normalize_output, ResourceLimits};

const STDERR_CAP: usize = 64 * 1024;
const REAP_GRACE: Duration = Duration::from_secs(1);
const DEFAULT_PATH: &str = "/usr/local/bin:/usr/bin:/bin";

const PYTHON_GUARD: &str = r#"
import sys, os, builtins
builtins.exit = builtins.quit = sys.exit
_scratch = os.path.realpath(os.getcwd())
_WRITE_FLAGS = os.O_WRONLY | os.O_RDWR | os.O_CREAT | os.O_APPEND | os.O_TRUNC
def _inside(p):
    if isinstance(p, int):
        return True
    try:
        rp = os.path.realpath(os.fsdecode(p))
    except Exception:
        return False
    return rp == _scratch or rp.startswith(_scratch + os.sep)
_PATH_EVENTS = {'os.remove', 'os.rmdir', 'os.mkdir', 'os.rename', 'os.symlink', 'os.link',
                'os.truncate', 'os.chmod', 'os.chown', 'os.utime', 'shutil.rmtree', 'shutil.move'}
_DENY = {'subprocess.Popen', 'os.system', 'os.exec', 'os.posix_spawn', 'os.spawn', 'os.fork',
         'os.forkpty', 'pty.spawn', 'os.kill', 'os.killpg', 'ctypes.dlopen'}
def _hook(event, args):
    if event == 'open':
        path, mode, flags = args
        writing = (isinstance(mode, str) and any(c in mode for c in 'wax+')) or (flags or 0) & _WRITE_FLAGS
        if writing and path is not None and not _inside(path):
            raise PermissionError('sandbox: write outside scratch directory: %r' % (path,))
    elif event in _PATH_EVENTS:
        for a in args:
            if isinstance(a, (str, bytes, os.PathLike)) and not _inside(a):
                raise PermissionError('sandbox: %s outside scratch directory' % event)
    elif event.startswith('socket.') or event in _DENY:
        raise PermissionError('sandbox: %s is not permitted' % event)
sys.argv = ['main.py']
with open('main.py', 'rb') as _f:
    _code = compile(_f.read(), 'main.py', 'exec')
sys.addaudithook(_hook)
del _f
_g = {'__name__': '__main__', '__builtins__': builtins}
exec(_code, _g)
"#;

/// How candidate programs are launched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxConfig {
    pub interpreter: String,
    pub interpreter_args: Vec<String>,
    /// Run the Python guard prelude before `main.py`.
    pub python_guard: bool,
    /// Move each child into an empty network namespace when permitted.
    pub isolate_network: bool,
    /// Parent directory for per-execution scratch directories.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scratch_root: Option<PathBuf>,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            interpreter: "python3".into(),
            interpreter_args: vec!["-I".into(), "-S".into(), "-B".into()],
            python_guard: true,
            isolate_network: true,
            scratch_root: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KillReason {
    WallTimeout,
    CpuTimeout,
    OutputLimit,
    Signal(i32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitStatus {
    Exited(i32),
    Killed(KillReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExecution {
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub exit_status: ExitStatus,
    pub wall_time_used: Duration,
    /// Peak resident set size reported by the kernel.
    pub peak_memory: u64,
    pub timed_out: bool,
    pub memory_exceeded: bool,
}

impl RawExecution {
    fn output_limited(&self) -> bool {
        self.exit_status == ExitStatus::Killed(KillReason::OutputLimit)
    }

    fn last_stderr_line(&self) -> String {
        let text = String::from_utf8_lossy(&self.stderr);
        let line = text
            .lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .unwrap_or("")
            .trim();
        line.chars().take(160).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Pass,
    WrongOutput,
    RuntimeError,
    Timeout,
    MemoryExceeded,
    OutputLimit,
    SandboxError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub kind: VerdictKind,
    pub detail: String,
}

impl Verdict {
    pub fn new(kind: VerdictKind, detail: impl Into<String>) -> Self {
        Verdict {
            kind,
            detail: detail.into(),
        }
    }

    pub fn passed(&self) -> bool {
        self.kind == VerdictKind::Pass
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("failed to spawn `{program}`: {source}")]
    Spawn {
        program: String,
        #[source]
        source: io::Error,
    },
    #[error("sandbox I/O failure: {0}")]
    Io(#[from] io::Error),
    #[error("stdin payload of {len} bytes exceeds the {cap}-byte test input cap")]
    InputTooLarge { len: usize, cap: u64 },
    #[error("child process could not be reaped: {0}")]
    Reap(String),
}

/// Failure signals shared by both verdict semantics, in precedence order.
fn termination_failure(raw: &RawExecution) -> Option<Verdict> {
    if raw.timed_out {
        return Some(Verdict::new(VerdictKind::Timeout, "time limit exceeded"));
    }
    if raw.memory_exceeded {
        return Some(Verdict::new(
            VerdictKind::MemoryExceeded,
            "memory limit exceeded",
        ));
    }
    if raw.output_limited() {
        return Some(Verdict::new(
            VerdictKind::OutputLimit,
            "output limit exceeded",
        ));
    }
    match raw.exit_status {
        ExitStatus::Exited(0) => None,
        ExitStatus::Exited(code) => Some(Verdict::new(
            VerdictKind::RuntimeError,
            format!("exit code {code}: {}", raw.last_stderr_line()),
        )),
        ExitStatus::Killed(reason) => Some(Verdict::new(
            VerdictKind::RuntimeError,
            format!("killed: {reason:?}"),
        )),
    }
}

/// Ground-truth semantics: clean termination and normalized exact match.
pub fn gt_verdict(raw: &RawExecution, expected: &[u8]) -> Verdict {
    if let Some(v) = termination_failure(raw) {
        return v;
    }
    if normalize_output(&raw.stdout) == normalize_output(expected) {
        Verdict::new(VerdictKind::Pass, "")
    } else {
        Verdict::new(VerdictKind::WrongOutput, "output differs from expected")
    }
}

/// Adversarial semantics: clean termination within limits; stdout is ignored.
pub fn adv_verdict(raw: &RawExecution) -> Verdict {
    termination_failure(raw).unwrap_or_else(|| Verdict::new(VerdictKind::Pass, ""))
}

/// One unit of work for [`Sandbox::run_batch`].
#[derive(Debug, Clone, Copy)]
pub struct Job<'a> {
    pub source: &'a str,
    pub stdin: &'a [u8],
    pub limits: ResourceLimits,
}

#[derive(Debug, Clone, Default)]
pub struct Sandbox {
    config: SandboxConfig,
}

impl Sandbox {
    pub fn new(config: SandboxConfig) -> Self {
        Sandbox { config }
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    /// Runs `source` once with `stdin` under `limits`.
    ///
    /// Returns only after the child's process group has been killed and the
    /// child reaped. `Err` means the harness failed, never the program.
    pub fn execute(
        &self,
        source: &str,
        stdin: &[u8],
        limits: &ResourceLimits,
    ) -> Result<RawExecution, SandboxError> {
        if stdin.len() as u64 > limits.max_test_input_bytes {
            return Err(SandboxError::InputTooLarge {
                len: stdin.len(),
                cap: limits.max_test_input_bytes,
            });
        }
        let scratch = match &self.config.scratch_root {
            Some(root) => tempfile::Builder::new()
                .prefix("crucible-")
                .tempdir_in(root)?,
            None => tempfile::Builder::new().prefix("crucible-").tempdir()?,
        };
        fs::write(scratch.path().join("main.py"), source)?;

        let mut cmd = Command::new(&self.config.interpreter);
        cmd.args(&self.config.interpreter_args);
        if self.config.python_guard {
            cmd.arg("-c").arg(PYTHON_GUARD);
        }
        cmd.arg("main.py")
            .current_dir(scratch.path())
            .env_clear()
            .env("PATH", DEFAULT_PATH)
            .env("HOME", scratch.path())
            .env("TMPDIR", scratch.path())
            .env("LANG", "C.UTF-8")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());

        let rlimits = RlimitPlan::from_limits(limits);
        let isolate_network = self.config.isolate_network;
        // SAFETY: the closure only issues async-signal-safe syscalls.
        unsafe {
            cmd.pre_exec(move || {
                if libc::setsid() < 0 {
                    return Err(io::Error::last_os_error());
                }
                rlimits.apply()?;
                if isolate_network {
                    // Unprivileged environments refuse this; the guard still
                    // blocks sockets at the interpreter level.
                    libc::unshare(libc::CLONE_NEWNET);
                }
                Ok(())
            });
        }

        let started = Instant::now();
        let mut child = cmd.spawn().map_err(|source| SandboxError::Spawn {
            program: self.config.interpreter.clone(),
            source,
        })?;
        let pid = child.id() as libc::pid_t;

        let mut stdin_pipe = child.stdin.take().expect("piped stdin");
        let payload = stdin.to_vec();
        let writer = thread::spawn(move || {
            let _ = stdin_pipe.write_all(&payload);
        });

        let stdout_buf = Arc::new(Mutex::new(CappedBuffer::new(limits.output_cap as usize)));
        let stderr_buf = Arc::new(Mutex::new(CappedBuffer::new(STDERR_CAP)));
        let (done_tx, done_rx) = mpsc::channel::<()>();
        let out_reader = spawn_reader(
            child.stdout.take().expect("piped stdout"),
            stdout_buf.clone(),
            Some(pid),
            done_tx.clone(),
        );
        let err_reader = spawn_reader(
            child.stderr.take().expect("piped stderr"),
            stderr_buf.clone(),
            None,
            done_tx,
        );

        let (wait_tx, wait_rx) = mpsc::channel();
        thread::spawn(move || {
            let _ = wait_tx.send(wait4(pid));
        });

        let mut wall_killed = false;
        let waited = match wait_rx.recv_timeout(limits.wall_time) {
            Ok(r) => r,
            Err(_) => {
                wall_killed = true;
                kill_group(pid);
                wait_rx.recv_timeout(REAP_GRACE).map_err(|_| {
                    SandboxError::Reap(format!("pid {pid} did not exit after SIGKILL"))
                })?
            }
        };
        let wall_time_used = started.elapsed();
        // Sweep any surviving descendants of the session.
        kill_group(pid);
        let (status, rusage) = waited.map_err(|e| SandboxError::Reap(e.to_string()))?;

        let deadline = Instant::now() + REAP_GRACE;
        for _ in 0..2 {
            let left = deadline.saturating_duration_since(Instant::now());
            if done_rx.recv_timeout(left).is_err() {
                break;
            }
        }
        if out_reader.is_finished() {
            let _ = out_reader.join();
        }
        if err_reader.is_finished() {
            let _ = err_reader.join();
        }
        if writer.is_finished() {
            let _ = writer.join();
        }
        drop(child);

        let (stdout, output_exceeded) = stdout_buf.lock().expect("stdout buffer").take();
        let (stderr, _) = stderr_buf.lock().expect("stderr buffer").take();

        let exit_status = if libc::WIFEXITED(status) {
            ExitStatus::Exited(libc::WEXITSTATUS(status))
        } else {
            let sig = libc::WTERMSIG(status);
            ExitStatus::Killed(if wall_killed {
                KillReason::WallTimeout
            } else if output_exceeded {
                KillReason::OutputLimit
            } else if sig == libc::SIGXCPU {
                KillReason::CpuTimeout
            } else {
                KillReason::Signal(sig)
            })
        };
        let timed_out = matches!(
            exit_status,
            ExitStatus::Killed(KillReason::WallTimeout | KillReason::CpuTimeout)
        );
        let peak_memory = (rusage.ru_maxrss.max(0) as u64) * 1024;
        let memory_exceeded =
            !timed_out && (peak_memory >= limits.memory || reports_memory_error(&stderr));

        let raw = RawExecution {
            stdout,
            stderr,
            exit_status,
            wall_time_used,
            peak_memory,
            timed_out,
            memory_exceeded,
        };
        if std::env::var_os("SANDBOX_DEBUG").is_some_and(|v| !v.is_empty()) {
            eprintln!(
                "[sandbox] scratch={} {:#?}",
                scratch.path().display(),
                DebugView(&raw)
            );
        }
        Ok(raw)
    }

    /// Executes `jobs` with at most `parallelism` concurrent children.
    /// Results are positionally aligned with `jobs`.
    pub fn run_batch(
        &self,
        jobs: &[Job<'_>],
        parallelism: usize,
    ) -> Vec<Result<RawExecution, SandboxError>> {
        let parallelism = parallelism.max(1).min(jobs.len().max(1));
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<RawExecution, SandboxError>>>> =
            jobs.iter().map(|_| Mutex::new(None)).collect();
        thread::scope(|scope| {
            for _ in 0..parallelism {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(job) = jobs.get(i) else { break };
                    let result = self.execute(job.source, job.stdin, &job.limits);
                    *slots[i].lock().expect("slot") = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().expect("slot").expect("every job runs"))
            .collect()
    }
}

fn reports_memory_error(stderr: &[u8]) -> bool {
    let text = String::from_utf8_lossy(stderr);
    text.lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .is_some_and(|l| l.trim_start().starts_with("MemoryError"))
}

struct DebugView<'a>(&'a RawExecution);

impl std::fmt::Debug for DebugView<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let r = self.0;
        f.debug_struct("RawExecution")
            .field("exit_status", &r.exit_status)
            .field("wall_time_used", &r.wall_time_used)
            .field("peak_memory", &r.peak_memory)
            .field("timed_out", &r.timed_out)
            .field("memory_exceeded", &r.memory_exceeded)
            .field("stdout", &String::from_utf8_lossy(&r.stdout))
            .field("stderr", &String::from_utf8_lossy(&r.stderr))
            .finish()
    }
}

#[derive(Clone, Copy)]
struct RlimitPlan {
    address_space: u64,
    cpu_seconds: u64,
    file_size: u64,
}

impl RlimitPlan {
    fn from_limits(limits: &ResourceLimits) -> Self {
        let cpu_ms = limits.cpu_time.as_millis() as u64;
        RlimitPlan {
            address_space: limits.memory,
            cpu_seconds: cpu_ms.div_ceil(1000).max(1),
            file_size: limits.output_cap,
        }
    }

    fn apply(&self) -> io::Result<()> {
        set_rlimit(libc::RLIMIT_AS, self.address_space, self.address_space)?;
        // SIGXCPU at the soft limit, SIGKILL one second later.
        set_rlimit(libc::RLIMIT_CPU, self.cpu_seconds, self.cpu_seconds + 1)?;
        set_rlimit(libc::RLIMIT_FSIZE, self.file_size, self.file_size)?;
        set_rlimit(libc::RLIMIT_CORE, 0, 0)?;
        set_rlimit(libc::RLIMIT_NOFILE, 64, 64)?;
        Ok(())
    }
}

fn set_rlimit(resource: libc::__rlimit_resource_t, soft: u64, hard: u64) -> io::Result<()> {
    let lim = libc::rlimit {
        rlim_cur: soft as libc::rlim_t,
        rlim_max: hard as libc::rlim_t,
    };
    // SAFETY: plain syscall on a stack value.
    if unsafe { libc::setrlimit(resource, &lim) } != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

fn kill_group(pgid: libc::pid_t) {
    // SAFETY: signalling our own child's process group.
    unsafe {
        libc::killpg(pgid, libc::SIGKILL);
    }
}

fn wait4(pid: libc::pid_t) -> io::Result<(libc::c_int, libc::rusage)> {
    let mut status: libc::c_int = 0;
    // SAFETY: zeroed rusage is a valid out-parameter.
    let mut rusage: libc::rusage = unsafe { std::mem::zeroed() };
    loop {
        // SAFETY: pid is our unreaped child.
        let r = unsafe { libc::wait4(pid, &mut status, 0, &mut rusage) };
        if r == pid {
            return Ok((status, rusage));
        }
        let err = io::Error::last_os_error();
        if err.kind() != io::ErrorKind::Interrupted {
            return Err(err);
        }
    }
}

struct CappedBuffer {
    data: Vec<u8>,
    cap: usize,
    exceeded: bool,
}

impl CappedBuffer {
    fn new(cap: usize) -> Self {
        CappedBuffer {
            data: Vec::new(),
            cap,
            exceeded: false,
        }
    }

    /// Appends what fits; returns true the first time the cap is crossed.
    fn push(&mut self, chunk: &[u8]) -> bool {
        let room = self.cap.saturating_sub(self.data.len());
        self.data.extend_from_slice(&chunk[..chunk.len().min(room)]);
        if chunk.len() > room && !self.exceeded {
            self.exceeded = true;
            return true;
        }
        false
    }

    fn take(&mut self) -> (Vec<u8>, bool) {
        (std::mem::take(&mut self.data), self.exceeded)
    }
}

fn spawn_reader<R: Read + Send + 'static>(
    mut pipe: R,
    buf: Arc<Mutex<CappedBuffer>>,
    kill_on_overflow: Option<libc::pid_t>,
    done: mpsc::Sender<()>,
) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        let mut chunk = [0u8; 16 * 1024];
        loop {
            match pipe.read(&mut chunk) {
                Ok(0) => break,
                Ok(n) => {
                    let crossed = buf.lock().expect("capture buffer").push(&chunk[..n]);
                    if crossed {
                        if let Some(pid) = kill_on_overflow {
                            kill_group(pid);
                        }
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(_) => break,
            }
        }
        let _ = done.send(());
    })
}
