//! Workdir locking and atomic, stamped stage directories.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const LOCK_FILE: &str = ".ebclkit.lock";
pub const STAMP_FILE: &str = "stamp.json";

/// Exclusive writer lock on a workdir, released on drop.
#[derive(Debug)]
pub struct Workdir {
    root: PathBuf,
    lock: PathBuf,
}

impl Workdir {
    pub fn lock(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating workdir {}", root.display()))?;
        let lock = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&lock).unwrap_or_default();
                bail!(
                    "workdir {} is locked by process {}; remove {} if that process is gone",
                    root.display(),
                    holder.trim(),
                    lock.display()
                );
            }
            Err(e) => return Err(e).with_context(|| format!("creating {}", lock.display())),
        }
        Ok(Self {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Starts writing the stage at `rel`. Refuses to replace an existing
    /// stage unless `force` is set.
    pub fn stage(&self, rel: &str, stamp: Stamp, force: bool) -> Result<Stage> {
        let target = self.path(rel);
        if target.exists() && !force {
            let previous = read_stamp(&target)
                .map(|s| format!(" (config hash {})", short(&s.config_hash)))
                .unwrap_or_default();
            bail!(
                "{} already exists{previous}; pass --force to overwrite",
                target.display()
            );
        }
        let parent = target.parent().expect("stage paths are nested in the workdir");
        fs::create_dir_all(parent)?;
        let name = target.file_name().expect("stage has a name").to_string_lossy();
        let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        Ok(Stage {
            tmp,
            target,
            stamp,
            committed: false,
        })
    }
}

impl Drop for Workdir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Identifies the configuration and seed behind an artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// Hashes or checkpoint ids of the inputs.
    pub inputs: serde_json::Map<String, serde_json::Value>,
    pub created_at: String,
}

impl Stamp {
    pub fn new(stage: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            stage: stage.into(),
            config_hash: config_hash.into(),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            inputs: serde_json::Map::new(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }

    pub fn input(mut self, name: &str, value: impl Into<serde_json::Value>) -> Self {
        self.inputs.insert(name.into(), value.into());
        self
    }
}

pub fn read_stamp(dir: &Path) -> Result<Stamp> {
    let path = dir.join(STAMP_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

/// A stage under construction. Nothing appears at the target path until
/// `commit`, which writes the stamp last and renames the directory in.
#[derive(Debug)]
pub struct Stage {
    tmp: PathBuf,
    target: PathBuf,
    stamp: Stamp,
    committed: bool,
}

impl Stage {
    pub fn file(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.file(name);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        fs::write(&path, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(path)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.file(name);
        fs::write(&path, text)?;
        Ok(path)
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        self.write_json(STAMP_FILE, &self.stamp)?;
        if self.target.exists() {
            fs::remove_dir_all(&self.target)
                .with_context(|| format!("removing previous {}", self.target.display()))?;
        }
        fs::rename(&self.tmp, &self.target)?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Stage {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = Workdir::lock(dir.path()).unwrap();
        assert!(Workdir::lock(dir.path()).is_err());
        drop(a);
        Workdir::lock(dir.path()).unwrap();
    }

    #[test]
    fn stages_are_atomic_and_stamped() {
        let dir = tempfile::tempdir().unwrap();
        let w = Workdir::lock(dir.path()).unwrap();
        {
            let s = w.stage("a/b", Stamp::new("b", "h1", 1), false).unwrap();
            s.write_text("x.txt", "partial").unwrap();
            // Dropped without commit: nothing is left behind.
        }
        assert!(!w.path("a/b").exists());
        assert_eq!(fs::read_dir(w.path("a")).unwrap().count(), 0);

        let s = w.stage("a/b", Stamp::new("b", "h1", 1), false).unwrap();
        s.write_text("x.txt", "done").unwrap();
        s.commit().unwrap();
        assert_eq!(read_stamp(&w.path("a/b")).unwrap().config_hash, "h1");

        let err = w.stage("a/b", Stamp::new("b", "h1", 1), false).unwrap_err().to_string();
        assert!(err.contains("--force") && err.contains("h1"), "{err}");
        let s = w.stage("a/b", Stamp::new("b", "h2", 1), true).unwrap();
        s.commit().unwrap();
        assert_eq!(read_stamp(&w.path("a/b")).unwrap().config_hash, "h2");
        assert!(!w.path("a/b/x.txt").exists());
    }
}
