//! Atomic file output, content hashing, and run manifests.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary file beside `path`, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// SHA-256 over `blob <len>\0<bytes>`, as git hashes file contents.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(content_hash(&bytes))
}

pub fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Everything needed to repeat a command: the effective configuration,
/// seeds, shard use, and the hash of the input checkpoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    /// Effective configuration, in config-file syntax.
    pub config: String,
    pub seeds: Vec<(String, u64)>,
    pub shards: String,
    pub input_checkpoint: Option<(PathBuf, String)>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# run manifest\n");
        writeln!(s, "command={}", self.command).unwrap();
        for (name, seed) in &self.seeds {
            writeln!(s, "seed.{name}={seed}").unwrap();
        }
        writeln!(s, "shards={}", self.shards).unwrap();
        match &self.input_checkpoint {
            Some((path, hash)) => {
                writeln!(s, "input_checkpoint={}", path.display()).unwrap();
                writeln!(s, "input_checkpoint_sha256={hash}").unwrap();
            }
            None => s.push_str("input_checkpoint=none\n"),
        }
        for o in &self.outputs {
            writeln!(s, "output={}", o.display()).unwrap();
        }
        writeln!(s, "started_unix={}", self.started_unix).unwrap();
        writeln!(s, "finished_unix={}", self.finished_unix).unwrap();
        s.push_str("\n# effective config\n");
        s.push_str(&self.config);
        s
    }

    /// Writes `manifest.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.txt");
        write_atomic(&path, self.to_text().as_bytes())?;
        Ok(path)
    }
}
