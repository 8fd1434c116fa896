//! Output files that only take their final names once a command succeeds.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub const PARTIAL_SUFFIX: &str = ".partial";

/// Files staged as `<name>.partial` until [`Outputs::commit`].
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    staged: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            staged: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Stages `name`. A stale final file of the same name is removed.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let final_path = self.path(name);
        if final_path.exists() {
            fs::remove_file(&final_path).with_context(|| format!("removing {}", final_path.display()))?;
        }
        let partial = self.path(&format!("{name}{PARTIAL_SUFFIX}"));
        fs::write(&partial, bytes).with_context(|| format!("writing {}", partial.display()))?;
        if !self.staged.iter().any(|s| s == name) {
            self.staged.push(name.to_string());
        }
        Ok(())
    }

    /// Stages the output of a writer function.
    pub fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf).with_context(|| format!("formatting {name}"))?;
        self.write(name, &buf)
    }

    /// Writes immediately under the final name.
    pub fn write_final(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }

    pub fn staged(&self) -> &[String] {
        &self.staged
    }

    /// Renames every staged file to its final name.
    pub fn commit(self) -> Result<Vec<PathBuf>> {
        self.staged
            .iter()
            .map(|name| {
                let from = self.path(&format!("{name}{PARTIAL_SUFFIX}"));
                let to = self.path(name);
                fs::rename(&from, &to).with_context(|| format!("renaming {}", from.display()))?;
                Ok(to)
            })
            .collect()
    }
}
