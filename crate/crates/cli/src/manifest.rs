use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use timepfn::dataset_store::file_checksum;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self> {
        let (bytes, sha256) = file_checksum(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            bytes,
            sha256,
        })
    }
}

/// Everything needed to rerun a command and check its artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    /// The resolved configuration with all defaults, in config-file syntax.
    pub config: String,
    pub seed: u64,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub version: String,
    pub duration_secs: f64,
    /// Command-specific results, e.g. final loss or metrics.
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn path_for(output: &Path) -> PathBuf {
        let mut name = output.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::new(crate::error::Kind::Parse, format!("{}: {e}", path.display()))
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, |tmp| {
            std::fs::write(tmp, text.as_bytes()).map_err(|e| CliError::io(path, e))
        })
    }
}

/// Runs `write` against a temporary file next to `path` and moves it into
/// place only if `write` succeeds.
pub fn write_atomic<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&Path) -> Result<()>,
{
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(path, e))?;
    write(tmp.path())?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// Like [`write_atomic`] for content produced through a writer.
pub fn write_atomic_with<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
{
    write_atomic(path, |tmp| {
        let file = std::fs::File::create(tmp).map_err(|e| CliError::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        write(&mut out).and_then(|_| out.flush()).map_err(|e| CliError::io(path, e))
    })
}
