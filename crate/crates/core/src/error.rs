use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Invalid parameters supplied by the caller.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("record separator must not be empty")]
    EmptySeparator,
    #[error("partition count must be at least 1")]
    ZeroPartitions,
    #[error("reduce depth must be at least 1")]
    ZeroDepth,
    #[error("worker pool needs at least one slot")]
    EmptyPool,
    #[error("mount path {0:?} must be absolute and non-empty")]
    BadMountPath(String),
    #[error("input and output mounts share the container path {0:?}")]
    SameMountPath(String),
    #[error("container path {0:?} is bound more than once")]
    DuplicateBind(String),
    #[error("container backend requires a non-empty image name")]
    EmptyImage,
}

/// Failures while moving partition data in or out of a task directory.
#[derive(Debug, Error)]
pub enum MountError {
    #[error(
        "memory-backed temp space at {root} is full while writing {path}; \
         configure a disk-backed temp root for partitions of this size"
    )]
    NoSpace { root: PathBuf, path: PathBuf },
    #[error("output mount {path} should be a {expected} but is not")]
    WrongKind { path: PathBuf, expected: &'static str },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl MountError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        MountError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures of a single container task.
#[derive(Debug, Error)]
pub enum ExecError {
    #[error("command exited with status {exit_code:?}: {}", tail_for_display(stderr_tail))]
    Failed {
        exit_code: Option<i32>,
        stderr_tail: Vec<u8>,
    },
    #[error("command timed out after {seconds}s and was killed")]
    Timeout { seconds: u64 },
    /// The backend itself is unusable (engine missing, image not pullable).
    #[error("execution environment error: {0}")]
    Environment(String),
    #[error("invalid task: {0}")]
    Config(#[from] ConfigError),
    #[error("I/O error while running task: {0}")]
    Io(#[from] io::Error),
}

impl ExecError {
    pub fn is_environment(&self) -> bool {
        matches!(self, ExecError::Environment(_))
    }
}

fn tail_for_display(tail: &[u8]) -> String {
    let s = String::from_utf8_lossy(tail);
    let s = s.trim_end();
    if s.is_empty() {
        "<no stderr>".to_string()
    } else {
        s.to_string()
    }
}

/// One task's failure, with whatever stage of its lifecycle broke.
#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Mount(#[from] MountError),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

impl TaskError {
    pub fn is_environment(&self) -> bool {
        matches!(self, TaskError::Exec(e) if e.is_environment())
    }
}

/// A failed operation on a dataset.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("task for partition {partition} failed after {attempts} attempt(s): {source}")]
    Task {
        partition: usize,
        /// Tree level for reduce; `None` for map.
        level: Option<usize>,
        attempts: usize,
        #[source]
        source: TaskError,
    },
    #[error("key function failed on record {index} (partition {partition}, offset {offset}): {message}")]
    Key {
        index: usize,
        partition: usize,
        offset: usize,
        message: String,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("source location {0} does not exist")]
    Missing(PathBuf),
}
