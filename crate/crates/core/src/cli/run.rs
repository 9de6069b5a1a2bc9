//! Run directories: an exclusive lock file plus a manifest that is written
//! when the run starts and finalised when it ends.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Fully resolved configuration.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub code_version: String,
    /// Input path -> SHA-256 of its contents.
    pub input_hashes: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// `running`, `ok` or `failed: <reason>`.
    pub status: String,
    /// Artifact name -> path relative to the run directory.
    pub artifacts: BTreeMap<String, PathBuf>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Write to a sibling temp file, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// SHA-256 of a file, or of every file under a directory (sorted relative
/// paths and contents).
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = walkdir::WalkDir::new(path)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .map(|e| e.into_path())
            .collect();
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0u8]);
            h.update(fs::read(&f)?);
        }
    } else {
        h.update(fs::read(path)?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Exclusive handle on a run directory; the lock file is removed on drop.
pub struct RunDir {
    pub root: PathBuf,
    pub manifest: RunManifest,
    lock: PathBuf,
}

impl RunDir {
    /// Creates `root` if needed, takes the lock and writes the initial manifest.
    pub fn open(
        root: &Path,
        command: &str,
        argv: Vec<String>,
        config: serde_json::Value,
        seeds: Vec<u64>,
        inputs: &[&Path],
    ) -> Result<Self> {
        fs::create_dir_all(root)?;
        let lock = root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Locked(root.to_path_buf()));
            }
            Err(e) => return Err(e.into()),
        }
        let mut dir = Self {
            root: root.to_path_buf(),
            manifest: RunManifest {
                command: command.into(),
                argv,
                config,
                seeds,
                code_version: env!("CARGO_PKG_VERSION").into(),
                input_hashes: BTreeMap::new(),
                started_at: now(),
                finished_at: None,
                status: "running".into(),
                artifacts: BTreeMap::new(),
            },
            lock,
        };
        for p in inputs {
            dir.manifest
                .input_hashes
                .insert(p.display().to_string(), hash_path(p)?);
        }
        dir.write_manifest()?;
        Ok(dir)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Records an artifact by its path relative to the run directory.
    pub fn artifact(&mut self, name: &str, path: &Path) {
        let rel = path.strip_prefix(&self.root).unwrap_or(path).to_path_buf();
        self.manifest.artifacts.insert(name.into(), rel);
    }

    fn write_manifest(&self) -> Result<()> {
        write_atomic(&self.path(MANIFEST_FILE), &serde_json::to_vec_pretty(&self.manifest)?)
    }

    pub fn finish(mut self, outcome: &Result<()>) -> Result<()> {
        self.manifest.finished_at = Some(now());
        self.manifest.status = match outcome {
            Ok(()) => "ok".into(),
            Err(e) => format!("failed: {e}"),
        };
        self.write_manifest()
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunDir::open(dir.path(), "x", vec![], serde_json::json!({}), vec![0], &[]).unwrap();
        assert!(matches!(
            RunDir::open(dir.path(), "x", vec![], serde_json::json!({}), vec![0], &[]),
            Err(Error::Locked(_))
        ));
        a.finish(&Ok(())).unwrap();
        let m: RunManifest = serde_json::from_slice(&fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(m.status, "ok");
        assert!(m.finished_at.is_some());
        assert!(!dir.path().join(LOCK_FILE).exists());
        RunDir::open(dir.path(), "x", vec![], serde_json::json!({}), vec![0], &[]).unwrap();
    }

    #[test]
    fn directory_hash_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a")).unwrap();
        fs::write(dir.path().join("a/x.txt"), "1").unwrap();
        let h1 = hash_path(dir.path()).unwrap();
        assert_eq!(h1, hash_path(dir.path()).unwrap());
        fs::write(dir.path().join("a/x.txt"), "2").unwrap();
        assert_ne!(h1, hash_path(dir.path()).unwrap());
    }
}
