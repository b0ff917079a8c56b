use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

/// Append-only JSON-lines file that counts its lines so a resumed run can
/// cut it back to the checkpointed length.
pub(crate) struct LineLog {
    path: PathBuf,
    file: File,
    lines: u64,
}

impl LineLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            lines: 0,
        })
    }

    /// Reopens `path` keeping only its first `keep` lines.
    pub fn truncate_to(path: &Path, keep: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path).unwrap_or_default();
        let kept: Vec<&str> = text.lines().take(keep as usize).collect();
        if (kept.len() as u64) < keep {
            return Err(Error::State(format!(
                "{} has {} lines but the checkpoint expects {keep}",
                path.display(),
                kept.len()
            )));
        }
        let mut body = kept.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        std::fs::write(path, body)?;
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            lines: keep,
        })
    }

    pub fn write(&mut self, value: &impl Serialize) -> Result<()> {
        let mut line = serde_json::to_string(value)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.lines += 1;
        Ok(())
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
