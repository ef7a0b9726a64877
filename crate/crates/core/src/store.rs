//! File-backed artifact store.
//!
//! ```text
//! <root>/
//!   store.lock
//!   runs/<run_id>.json          run records (replaced atomically)
//!   corpora/<id>.jsonl          post collections and user sets
//!   taxonomies/<draft_id>.json  taxonomy drafts
//!   reviews/<run_id>.json       review event logs
//!   reports/<id>.{json,txt}     stats, classification and evaluation output
//! ```
//!
//! Every write goes to a temporary file in the target directory, is synced and
//! then renamed over the destination, so readers never see a partial record.
//! Content artifacts are named by the hash of their bytes and never rewritten.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SUBDIRS: [&str; 5] = ["runs", "corpora", "taxonomies", "reviews", "reports"];
pub const LOCK_FILE: &str = "store.lock";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{op} {path}: {source}")]
    Io {
        op: &'static str,
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt record {path}: {message}")]
    Corrupt { path: String, message: String },
    #[error("store is locked by process {pid} ({path})")]
    Locked { pid: u32, path: String },
    #[error("not found: {0}")]
    NotFound(String),
}

fn io<'a>(op: &'static str, path: &'a Path) -> impl FnOnce(std::io::Error) -> StoreError + 'a {
    move |source| StoreError::Io {
        op,
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Corpus,
    Taxonomy,
    Report,
}

impl ArtifactKind {
    fn dir(self) -> &'static str {
        match self {
            ArtifactKind::Corpus => "corpora",
            ArtifactKind::Taxonomy => "taxonomies",
            ArtifactKind::Report => "reports",
        }
    }
}

/// Writes `bytes` to `path` via temp file, fsync and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let mut f = File::create(&tmp).map_err(io("create", &tmp))?;
    f.write_all(bytes).map_err(io("write", &tmp))?;
    f.sync_all().map_err(io("sync", &tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io("rename", path))?;
    // best effort: persist the directory entry too
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

pub fn content_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    /// Opens (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for sub in SUBDIRS {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io("create", &dir))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Stores content-addressed bytes; returns the path relative to the root.
    /// Writing the same bytes twice is a no-op.
    pub fn put(&self, kind: ArtifactKind, ext: &str, bytes: &[u8]) -> Result<String, StoreError> {
        let rel = format!("{}/{}.{ext}", kind.dir(), content_id(bytes));
        let path = self.path(&rel);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(rel)
    }

    pub fn put_json<T: Serialize>(&self, kind: ArtifactKind, value: &T) -> Result<String, StoreError> {
        let bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
        self.put(kind, "json", &bytes)
    }

    /// Stores a taxonomy draft under its own id. Drafts are immutable.
    pub fn put_named(&self, kind: ArtifactKind, name: &str, bytes: &[u8]) -> Result<String, StoreError> {
        let rel = format!("{}/{name}", kind.dir());
        let path = self.path(&rel);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(rel)
    }

    pub fn read(&self, rel: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.path(rel);
        fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StoreError::NotFound(rel.to_string()),
            _ => io("read", &path)(e),
        })
    }

    pub fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<T, StoreError> {
        let bytes = self.read(rel)?;
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
            path: rel.to_string(),
            message: e.to_string(),
        })
    }

    /// Replaces a mutable record (run or review log) atomically.
    pub fn write_record<T: Serialize>(&self, rel: &str, value: &T) -> Result<(), StoreError> {
        let bytes = serde_json::to_vec_pretty(value).expect("record serializes");
        write_atomic(&self.path(rel), &bytes)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    /// File stems in a subdirectory, sorted; temp files are skipped.
    pub fn list(&self, sub: &str, ext: &str) -> Result<Vec<String>, StoreError> {
        let dir = self.path(sub);
        let mut out: Vec<String> = fs::read_dir(&dir)
            .map_err(io("list", &dir))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                (!name.starts_with('.'))
                    .then(|| name.strip_suffix(&format!(".{ext}")).map(str::to_string))
                    .flatten()
            })
            .collect();
        out.sort();
        Ok(out)
    }

    pub fn lock(&self) -> Result<StoreLock, StoreError> {
        StoreLock::acquire(&self.root)
    }
}

/// Exclusive advisory lock on a store root, released on drop. A lock left by
/// a process that no longer exists is taken over.
#[derive(Debug)]
pub struct StoreLock {
    path: PathBuf,
}

fn pid_alive(pid: u32) -> bool {
    if cfg!(target_os = "linux") {
        Path::new(&format!("/proc/{pid}")).exists()
    } else {
        true
    }
}

impl StoreLock {
    pub fn acquire(root: &Path) -> Result<Self, StoreError> {
        let path = root.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id()).map_err(io("write", &path))?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path)
                        .ok()
                        .and_then(|s| s.trim().parse::<u32>().ok());
                    match holder {
                        Some(pid) if pid_alive(pid) => {
                            return Err(StoreError::Locked {
                                pid,
                                path: path.display().to_string(),
                            })
                        }
                        _ => {
                            tracing::warn!(path = %path.display(), "removing stale store lock");
                            let _ = fs::remove_file(&path);
                        }
                    }
                }
                Err(e) => return Err(io("lock", &path)(e)),
            }
        }
        Err(StoreError::Locked {
            pid: 0,
            path: path.display().to_string(),
        })
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
