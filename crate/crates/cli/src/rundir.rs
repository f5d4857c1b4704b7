//! Experiment directories: single-writer lock and content-hash manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nnpp_core::persist::{sha256_hex, write_atomic};
use nnpp_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lock";

/// Held while a command writes into a run directory.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is locked by another writer (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// SHA-256 of every artifact in a run directory, by relative path.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub files: BTreeMap<String, String>,
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        let name = e.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') || (dir == root && name == MANIFEST) {
            continue;
        }
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("under root")
                .to_string_lossy()
                .replace('\\', "/");
            out.insert(rel, sha256_hex(&fs::read(&path)?));
        }
    }
    Ok(())
}

impl Manifest {
    pub fn scan(dir: &Path) -> Result<Self> {
        let mut files = BTreeMap::new();
        collect(dir, dir, &mut files)?;
        Ok(Self { files })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))
    }

    /// Rescans `dir` and rewrites its manifest. Call while holding the lock.
    pub fn refresh(dir: &Path, _lock: &RunLock) -> Result<Self> {
        let m = Self::scan(dir)?;
        write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(&m)?.as_bytes())?;
        Ok(m)
    }

    /// Fails unless `rel` exists with the recorded hash.
    pub fn check(&self, dir: &Path, rel: &str) -> Result<()> {
        let recorded = self
            .files
            .get(rel)
            .ok_or_else(|| Error::Verification(format!("{rel} is not in the manifest")))?;
        let actual = sha256_hex(&fs::read(dir.join(rel))?);
        if &actual != recorded {
            return Err(Error::Verification(format!("{rel} does not match its manifest hash")));
        }
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
