//! Running one containerized command against bound mounts.
//!
//! Two backends share the [`Backend`] trait: [`ContainerBackend`] drives a
//! container engine through its command-line client, and
//! [`SubprocessBackend`] runs the command directly under `sh -c` with
//! every container path rewritten to its host path. The latter needs no
//! daemon and is what the test suite uses.

use std::collections::HashSet;
use std::fmt;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::error::{ConfigError, ExecError};

/// Bytes of stderr kept on failure.
pub const STDERR_TAIL: usize = 8 * 1024;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bind {
    pub host: PathBuf,
    pub container: String,
    pub read_only: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContainerTask {
    pub image: String,
    pub command: String,
    pub binds: Vec<Bind>,
    pub env: Vec<(String, String)>,
    /// `None` waits forever.
    pub timeout: Option<Duration>,
    pub cpu_limit: Option<u32>,
    /// Host working directory for the subprocess backend.
    pub workdir: Option<PathBuf>,
}

impl ContainerTask {
    pub fn new(image: impl Into<String>, command: impl Into<String>) -> Self {
        ContainerTask {
            image: image.into(),
            command: command.into(),
            ..Default::default()
        }
    }

    pub fn bind(mut self, host: impl Into<PathBuf>, container: impl Into<String>, read_only: bool) -> Self {
        self.binds.push(Bind {
            host: host.into(),
            container: container.into(),
            read_only,
        });
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut seen = HashSet::new();
        for b in &self.binds {
            if !b.container.starts_with('/') || b.container.len() < 2 {
                return Err(ConfigError::BadMountPath(b.container.clone()));
            }
            if !seen.insert(b.container.as_str()) {
                return Err(ConfigError::DuplicateBind(b.container.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskOutcome {
    /// `None` when the process was killed by a signal.
    pub exit_code: Option<i32>,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub wall_time: Duration,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Container,
    Subprocess,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Container => "container",
            BackendKind::Subprocess => "subprocess",
        })
    }
}

/// Requested backend; `Auto` picks the container engine when reachable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    #[default]
    Auto,
    Container,
    Subprocess,
}

impl FromStr for BackendChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(BackendChoice::Auto),
            "container" => Ok(BackendChoice::Container),
            "subprocess" => Ok(BackendChoice::Subprocess),
            other => Err(format!(
                "unknown executor backend {other:?} (expected container, subprocess or auto)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PullPolicy {
    #[default]
    IfNotPresent,
    Always,
    Never,
}

impl FromStr for PullPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "if-not-present" => Ok(PullPolicy::IfNotPresent),
            "always" => Ok(PullPolicy::Always),
            "never" => Ok(PullPolicy::Never),
            other => Err(format!("unknown pull policy {other:?}")),
        }
    }
}

pub trait Backend: Send + Sync + fmt::Debug {
    fn kind(&self) -> BackendKind;

    /// Runs the task to completion. A nonzero exit is an error.
    fn run(&self, task: &ContainerTask) -> Result<TaskOutcome, ExecError>;
}

/// Runs commands on the host with container paths rewritten to host paths.
#[derive(Clone, Debug, Default)]
pub struct SubprocessBackend;

impl Backend for SubprocessBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Subprocess
    }

    fn run(&self, task: &ContainerTask) -> Result<TaskOutcome, ExecError> {
        task.validate()?;
        for b in &task.binds {
            if !b.host.exists() {
                return Err(ExecError::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("bind source {} does not exist", b.host.display()),
                )));
            }
            check_shell_safe(&b.host)?;
        }
        let command = substitute_paths(&task.command, &task.binds);
        let mut cmd = Command::new("sh");
        cmd.arg("-c").arg(&command);
        if let Some(dir) = &task.workdir {
            cmd.current_dir(dir).env("TMPDIR", dir);
        }
        cmd.envs(task.env.iter().map(|(k, v)| (k, v)));
        let outcome = run_process(cmd, task.timeout, || {})?;
        check_exit(outcome)
    }
}

fn check_shell_safe(path: &Path) -> Result<(), ExecError> {
    let s = path.to_string_lossy();
    let bad = s
        .chars()
        .any(|c| c.is_whitespace() || "'\"`$\\!*?[](){}<>|&;#~".contains(c));
    if bad {
        return Err(ExecError::Environment(format!(
            "host path {s:?} contains shell metacharacters; choose a plainer temp root"
        )));
    }
    Ok(())
}

fn is_path_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | '/' | '$' | '{' | '}')
}

/// Replaces each occurrence of a bind's container path with its host path.
///
/// An occurrence counts only as a whole path token: it must not be glued
/// to a preceding path character, and may be followed only by `/` or a
/// non-path character. Longer container paths win over their prefixes.
pub fn substitute_paths(command: &str, binds: &[Bind]) -> String {
    let mut binds: Vec<&Bind> = binds.iter().collect();
    binds.sort_by_key(|b| std::cmp::Reverse(b.container.len()));
    let mut out = String::with_capacity(command.len());
    let mut i = 0;
    let mut prev: Option<char> = None;
    'scan: while i < command.len() {
        let rest = &command[i..];
        if prev.is_none_or(|c| !is_path_char(c)) {
            for b in &binds {
                if let Some(after) = rest.strip_prefix(b.container.as_str()) {
                    let next = after.chars().next();
                    if next.is_none_or(|c| c == '/' || !is_path_char(c)) {
                        out.push_str(&b.host.to_string_lossy());
                        i += b.container.len();
                        prev = b.container.chars().last();
                        continue 'scan;
                    }
                }
            }
        }
        let c = rest.chars().next().unwrap();
        out.push(c);
        prev = Some(c);
        i += c.len_utf8();
    }
    out
}

/// Drives a container engine (`docker`, `podman`) through its CLI.
#[derive(Debug)]
pub struct ContainerBackend {
    engine: String,
    pull_policy: PullPolicy,
    present: Mutex<HashSet<String>>,
    counter: AtomicU64,
}

impl ContainerBackend {
    pub fn new(engine: impl Into<String>, pull_policy: PullPolicy) -> Self {
        ContainerBackend {
            engine: engine.into(),
            pull_policy,
            present: Mutex::new(HashSet::new()),
            counter: AtomicU64::new(0),
        }
    }

    pub fn engine(&self) -> &str {
        &self.engine
    }

    fn ensure_image(&self, image: &str) -> Result<(), ExecError> {
        if self.pull_policy != PullPolicy::Always && self.present.lock().unwrap().contains(image) {
            return Ok(());
        }
        let inspect = Command::new(&self.engine)
            .args(["image", "inspect", image])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map_err(|e| ExecError::Environment(format!("cannot invoke {}: {e}", self.engine)))?;
        let need_pull = match self.pull_policy {
            PullPolicy::Always => true,
            PullPolicy::IfNotPresent => !inspect.success(),
            PullPolicy::Never if !inspect.success() => {
                return Err(ExecError::Environment(format!(
                    "image {image:?} not present and pull policy is never"
                )))
            }
            PullPolicy::Never => false,
        };
        if need_pull {
            log::info!("pulling image {image}");
            let out = Command::new(&self.engine)
                .args(["pull", image])
                .stdin(Stdio::null())
                .output()
                .map_err(|e| ExecError::Environment(format!("cannot invoke {}: {e}", self.engine)))?;
            if !out.status.success() {
                return Err(ExecError::Environment(format!(
                    "image {image:?} not present and not pullable: {}",
                    String::from_utf8_lossy(&out.stderr).trim()
                )));
            }
        }
        self.present.lock().unwrap().insert(image.to_string());
        Ok(())
    }

    fn docker_args(&self, task: &ContainerTask, name: &str) -> Vec<String> {
        let mut args = vec![
            "run".to_string(),
            "--rm".to_string(),
            "--name".to_string(),
            name.to_string(),
        ];
        // SAFETY: getuid/getgid cannot fail
        let (uid, gid) = unsafe { (libc::getuid(), libc::getgid()) };
        args.push("--user".into());
        args.push(format!("{uid}:{gid}"));
        for b in &task.binds {
            args.push("-v".into());
            let ro = if b.read_only { ":ro" } else { "" };
            args.push(format!("{}:{}{ro}", b.host.display(), b.container));
        }
        for (k, v) in &task.env {
            args.push("-e".into());
            args.push(format!("{k}={v}"));
        }
        if let Some(cpus) = task.cpu_limit {
            args.push("--cpus".into());
            args.push(cpus.to_string());
        }
        args.extend([
            "--entrypoint".to_string(),
            "sh".to_string(),
            task.image.clone(),
            "-c".to_string(),
            task.command.clone(),
        ]);
        args
    }
}

impl Backend for ContainerBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Container
    }

    fn run(&self, task: &ContainerTask) -> Result<TaskOutcome, ExecError> {
        task.validate()?;
        if task.image.is_empty() {
            return Err(ConfigError::EmptyImage.into());
        }
        self.ensure_image(&task.image)?;
        let name = format!(
            "boxmr-{}-{}",
            std::process::id(),
            self.counter.fetch_add(1, Ordering::SeqCst)
        );
        let mut cmd = Command::new(&self.engine);
        cmd.args(self.docker_args(task, &name));
        let engine = self.engine.clone();
        let outcome = run_process(cmd, task.timeout, || {
            let _ = Command::new(&engine)
                .args(["rm", "-f", &name])
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .status();
        })?;
        check_exit(outcome)
    }
}

fn check_exit(outcome: TaskOutcome) -> Result<TaskOutcome, ExecError> {
    if outcome.exit_code == Some(0) {
        Ok(outcome)
    } else {
        let start = outcome.stderr.len().saturating_sub(STDERR_TAIL);
        Err(ExecError::Failed {
            exit_code: outcome.exit_code,
            stderr_tail: outcome.stderr[start..].to_vec(),
        })
    }
}

/// Spawns `cmd` in its own process group, drains stdout/stderr fully, and
/// kills the whole group if `timeout` elapses.
fn run_process(
    mut cmd: Command,
    timeout: Option<Duration>,
    on_timeout: impl FnOnce(),
) -> Result<TaskOutcome, ExecError> {
    let started = Instant::now();
    cmd.stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    let mut child = cmd.spawn().map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ExecError::Environment(format!("cannot spawn {:?}: {e}", cmd.get_program())),
        _ => ExecError::Io(e),
    })?;
    let drain = |pipe: Option<Box<dyn Read + Send>>| {
        std::thread::spawn(move || {
            let mut buf = Vec::new();
            if let Some(mut p) = pipe {
                let _ = p.read_to_end(&mut buf);
            }
            buf
        })
    };
    let out = drain(child.stdout.take().map(|p| Box::new(p) as Box<dyn Read + Send>));
    let err = drain(child.stderr.take().map(|p| Box::new(p) as Box<dyn Read + Send>));

    let status = match timeout {
        None => Some(child.wait()?),
        Some(t) => child.wait_timeout(t)?,
    };
    let status = match status {
        Some(s) => s,
        None => {
            let pgid = child.id() as libc::pid_t;
            // SAFETY: signalling our own child's process group
            unsafe {
                libc::kill(-pgid, libc::SIGKILL);
            }
            on_timeout();
            let _ = child.wait();
            let _ = out.join();
            let _ = err.join();
            return Err(ExecError::Timeout {
                seconds: timeout.unwrap_or_default().as_secs(),
            });
        }
    };
    let stdout = out.join().unwrap_or_default();
    let stderr = err.join().unwrap_or_default();
    Ok(TaskOutcome {
        exit_code: status.code(),
        stdout,
        stderr,
        wall_time: started.elapsed(),
    })
}

#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

/// A backend plus a ceiling on concurrently running tasks.
#[derive(Clone, Debug)]
pub struct Executor {
    backend: Arc<dyn Backend>,
    slots: Arc<Slots>,
}

impl Executor {
    pub fn new(backend: Arc<dyn Backend>, slots: usize) -> Self {
        Executor {
            backend,
            slots: Arc::new(Slots {
                free: Mutex::new(slots.max(1)),
                cv: Condvar::new(),
            }),
        }
    }

    pub fn subprocess(slots: usize) -> Self {
        Self::new(Arc::new(SubprocessBackend), slots)
    }

    /// Resolves `choice` against what [`probe_backend`] finds.
    pub fn from_choice(choice: BackendChoice, engine: &str, pull: PullPolicy, slots: usize) -> Result<Self, ExecError> {
        let report = probe_backend(engine, choice);
        match report.selected {
            Some(BackendKind::Container) => Ok(Self::new(Arc::new(ContainerBackend::new(engine, pull)), slots)),
            Some(BackendKind::Subprocess) => Ok(Self::subprocess(slots)),
            None => Err(ExecError::Environment(format!(
                "no usable executor backend: {}",
                report.detail
            ))),
        }
    }

    pub fn kind(&self) -> BackendKind {
        self.backend.kind()
    }

    pub fn run(&self, task: &ContainerTask) -> Result<TaskOutcome, ExecError> {
        {
            let mut free = self.slots.free.lock().unwrap();
            while *free == 0 {
                free = self.slots.cv.wait(free).unwrap();
            }
            *free -= 1;
        }
        let result = self.backend.run(task);
        *self.slots.free.lock().unwrap() += 1;
        self.slots.cv.notify_one();
        result
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Availability {
    Available,
    Unavailable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendReport {
    pub container: Availability,
    pub subprocess: Availability,
    pub selected: Option<BackendKind>,
    pub detail: String,
}

/// Checks which backends can run. Never mutates anything.
pub fn probe_backend(engine: &str, choice: BackendChoice) -> BackendReport {
    let subprocess = if Path::new("/bin/sh").exists() {
        Availability::Available
    } else {
        Availability::Unavailable
    };
    if choice == BackendChoice::Subprocess {
        let selected = (subprocess == Availability::Available).then_some(BackendKind::Subprocess);
        return BackendReport {
            container: Availability::Unavailable,
            subprocess,
            selected,
            detail: "subprocess backend forced by configuration; container engine not probed".into(),
        };
    }
    let (container, detail) = probe_engine(engine);
    let selected = match (choice, container, subprocess) {
        (_, Availability::Available, _) => Some(BackendKind::Container),
        (BackendChoice::Auto, _, Availability::Available) => Some(BackendKind::Subprocess),
        _ => None,
    };
    BackendReport {
        container,
        subprocess,
        selected,
        detail,
    }
}

fn probe_engine(engine: &str) -> (Availability, String) {
    let mut cmd = Command::new(engine);
    cmd.args(["version", "--format", "{{.Server.Version}}"]);
    match run_process(cmd, Some(Duration::from_secs(10)), || {}) {
        Ok(o) if o.exit_code == Some(0) => (
            Availability::Available,
            format!("{engine} server {}", String::from_utf8_lossy(&o.stdout).trim()),
        ),
        Ok(o) => (
            Availability::Unavailable,
            format!(
                "{engine} daemon unreachable: {}",
                String::from_utf8_lossy(&o.stderr).trim()
            ),
        ),
        Err(e) => (Availability::Unavailable, format!("{engine} not usable: {e}")),
    }
}
