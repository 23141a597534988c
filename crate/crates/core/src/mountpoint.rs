//! Marshalling partitions into host files that get bound into containers,
//! and reading container output back into records.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::dataset::{split_records, Partition, Record, Separator};
use crate::error::{ConfigError, MountError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MountKind {
    /// All records of a partition in one file, each followed by the separator.
    TextFile { separator: Separator },
    /// A directory holding one file per record.
    BinaryFiles,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MountPoint {
    kind: MountKind,
    container_path: String,
}

impl MountPoint {
    pub fn text_file(container_path: impl Into<String>) -> Result<Self, ConfigError> {
        Self::text_file_with(container_path, Separator::newline())
    }

    pub fn text_file_with(container_path: impl Into<String>, separator: Separator) -> Result<Self, ConfigError> {
        Self::new(MountKind::TextFile { separator }, container_path)
    }

    pub fn binary_files(container_path: impl Into<String>) -> Result<Self, ConfigError> {
        Self::new(MountKind::BinaryFiles, container_path)
    }

    pub fn new(kind: MountKind, container_path: impl Into<String>) -> Result<Self, ConfigError> {
        let container_path = container_path.into();
        if !container_path.starts_with('/') || container_path.len() < 2 {
            return Err(ConfigError::BadMountPath(container_path));
        }
        Ok(MountPoint { kind, container_path })
    }

    pub fn kind(&self) -> &MountKind {
        &self.kind
    }

    pub fn container_path(&self) -> &str {
        &self.container_path
    }

    pub fn separator(&self) -> Option<&Separator> {
        match &self.kind {
            MountKind::TextFile { separator } => Some(separator),
            MountKind::BinaryFiles => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backing {
    /// A directory the operator asserts is RAM-backed (tmpfs or similar).
    MemoryFs,
    Disk,
}

/// Root under which every task gets a fresh private directory.
#[derive(Clone, Debug)]
pub struct TempSpace {
    inner: Arc<TempSpaceInner>,
}

#[derive(Debug)]
struct TempSpaceInner {
    root: PathBuf,
    backing: Backing,
    keep_temp: bool,
    next: AtomicU64,
}

impl TempSpace {
    pub fn new(root: impl Into<PathBuf>, backing: Backing) -> Self {
        TempSpace {
            inner: Arc::new(TempSpaceInner {
                root: root.into(),
                backing,
                keep_temp: false,
                next: AtomicU64::new(0),
            }),
        }
    }

    /// `/dev/shm` when present, otherwise the system temp dir on disk.
    pub fn default_root() -> Self {
        let shm = Path::new("/dev/shm");
        if shm.is_dir() {
            TempSpace::new(shm, Backing::MemoryFs)
        } else {
            TempSpace::new(std::env::temp_dir(), Backing::Disk)
        }
    }

    pub fn keep_temp(self, keep: bool) -> Self {
        let inner = &self.inner;
        TempSpace {
            inner: Arc::new(TempSpaceInner {
                root: inner.root.clone(),
                backing: inner.backing,
                keep_temp: keep,
                next: AtomicU64::new(inner.next.load(Ordering::SeqCst)),
            }),
        }
    }

    pub fn root(&self) -> &Path {
        &self.inner.root
    }

    pub fn backing(&self) -> Backing {
        self.inner.backing
    }

    /// Creates a fresh, empty, uniquely named task directory.
    pub fn allocate(&self) -> Result<TaskDir, MountError> {
        let root = &self.inner.root;
        fs::create_dir_all(root).map_err(|e| MountError::io(root, e))?;
        loop {
            let n = self.inner.next.fetch_add(1, Ordering::SeqCst);
            let path = root.join(format!("boxmr-{}-{n}", std::process::id()));
            match fs::create_dir(&path) {
                Ok(()) => {
                    return Ok(TaskDir {
                        path,
                        space: self.clone(),
                        mounts: 0,
                    })
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(MountError::io(path, e)),
            }
        }
    }

    fn write_error(&self, path: &Path, e: io::Error) -> MountError {
        if self.inner.backing == Backing::MemoryFs && is_no_space(&e) {
            MountError::NoSpace {
                root: self.inner.root.clone(),
                path: path.to_path_buf(),
            }
        } else {
            MountError::io(path, e)
        }
    }
}

fn is_no_space(e: &io::Error) -> bool {
    e.kind() == io::ErrorKind::StorageFull || e.raw_os_error() == Some(libc::ENOSPC)
}

/// A task's private directory, removed on drop unless `keep_temp` is set.
#[derive(Debug)]
pub struct TaskDir {
    path: PathBuf,
    space: TempSpace,
    mounts: usize,
}

impl TaskDir {
    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Scratch directory the command may use as its working directory.
    pub fn scratch(&self) -> Result<PathBuf, MountError> {
        let p = self.path.join("scratch");
        fs::create_dir_all(&p).map_err(|e| MountError::io(&p, e))?;
        Ok(p)
    }

    fn host_path_for(&mut self, mp: &MountPoint) -> PathBuf {
        let base = mp
            .container_path()
            .rsplit('/')
            .find(|s| !s.is_empty())
            .unwrap_or("mount");
        let dir = self.path.join(format!("m{}", self.mounts));
        self.mounts += 1;
        dir.join(base)
    }

    /// Writes `partition` at a fresh host path for `mp`. Returns the host
    /// path and the number of bytes written.
    pub fn materialize(&mut self, partition: &Partition, mp: &MountPoint) -> Result<(PathBuf, u64), MountError> {
        let host = self.host_path_for(mp);
        let parent = host.parent().expect("mount path has a parent");
        fs::create_dir_all(parent).map_err(|e| MountError::io(parent, e))?;
        let written = match mp.kind() {
            MountKind::TextFile { separator } => {
                let file = fs::File::create(&host).map_err(|e| self.space.write_error(&host, e))?;
                let mut w = io::BufWriter::with_capacity(1 << 20, file);
                let mut n = 0u64;
                for r in partition.records() {
                    w.write_all(r.as_bytes())
                        .and_then(|_| w.write_all(separator.as_bytes()))
                        .map_err(|e| self.space.write_error(&host, e))?;
                    n += (r.len() + separator.len()) as u64;
                }
                w.flush().map_err(|e| self.space.write_error(&host, e))?;
                n
            }
            MountKind::BinaryFiles => {
                fs::create_dir(&host).map_err(|e| self.space.write_error(&host, e))?;
                let mut n = 0u64;
                for (i, r) in partition.records().iter().enumerate() {
                    let file = host.join(format!("part-{i:05}"));
                    fs::write(&file, r.as_bytes()).map_err(|e| self.space.write_error(&file, e))?;
                    n += r.len() as u64;
                }
                n
            }
        };
        Ok((host, written))
    }

    /// Prepares an empty output location for `mp`: an empty file for text
    /// mounts (so it can be bind-mounted), an empty directory otherwise.
    pub fn prepare_output(&mut self, mp: &MountPoint) -> Result<PathBuf, MountError> {
        let host = self.host_path_for(mp);
        let parent = host.parent().expect("mount path has a parent");
        fs::create_dir_all(parent).map_err(|e| MountError::io(parent, e))?;
        match mp.kind() {
            MountKind::TextFile { .. } => fs::File::create(&host).map(drop),
            MountKind::BinaryFiles => fs::create_dir(&host),
        }
        .map_err(|e| self.space.write_error(&host, e))?;
        Ok(host)
    }
}

impl Drop for TaskDir {
    fn drop(&mut self) {
        if self.space.inner.keep_temp {
            log::info!("keeping task directory {}", self.path.display());
            return;
        }
        if let Err(e) = fs::remove_dir_all(&self.path) {
            if e.kind() != io::ErrorKind::NotFound {
                log::warn!("failed to remove task directory {}: {e}", self.path.display());
            }
        }
    }
}

/// Reads records back from an output mount. A missing output yields no
/// records and a warning.
pub fn collect_output(mp: &MountPoint, host_path: &Path) -> Result<Vec<Record>, MountError> {
    let meta = match fs::metadata(host_path) {
        Ok(m) => m,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            log::warn!(
                "output mount {} ({}) was not produced; treating as empty",
                mp.container_path(),
                host_path.display()
            );
            return Ok(Vec::new());
        }
        Err(e) => return Err(MountError::io(host_path, e)),
    };
    match mp.kind() {
        MountKind::TextFile { separator } => {
            if !meta.is_file() {
                return Err(MountError::WrongKind {
                    path: host_path.to_path_buf(),
                    expected: "regular file",
                });
            }
            let bytes = fs::read(host_path).map_err(|e| MountError::io(host_path, e))?;
            Ok(split_records(&Bytes::from(bytes), separator))
        }
        MountKind::BinaryFiles => {
            if !meta.is_dir() {
                return Err(MountError::WrongKind {
                    path: host_path.to_path_buf(),
                    expected: "directory",
                });
            }
            let mut files = Vec::new();
            for entry in fs::read_dir(host_path).map_err(|e| MountError::io(host_path, e))? {
                let entry = entry.map_err(|e| MountError::io(host_path, e))?;
                let ty = entry.file_type().map_err(|e| MountError::io(entry.path(), e))?;
                if ty.is_file() {
                    files.push(entry.path());
                } else {
                    log::warn!("ignoring non-file entry {} in output mount", entry.path().display());
                }
            }
            // lexicographic by raw file name bytes
            files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
            files
                .into_iter()
                .map(|f| fs::read(&f).map(Record::from).map_err(|e| MountError::io(&f, e)))
                .collect()
        }
    }
}
