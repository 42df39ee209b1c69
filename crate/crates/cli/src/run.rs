//! Run directories: promote-on-success outputs and the append-only run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trigen_core::util::hex_string;
use trigen_core::{Error, Result};

pub const MANIFEST_FILE: &str = "run_manifest.json";
const PARTIAL_SUFFIX: &str = ".partial";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub config_hash: String,
    /// Content digest of the stage's outputs.
    pub artifact_version: String,
    pub tool_version: String,
    pub started: u64,
    pub finished: u64,
    pub inputs: Vec<String>,
    /// Paths relative to the run root.
    pub outputs: Vec<String>,
    pub metrics: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub records: Vec<StageRecord>,
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn invalid(path: &Path, msg: impl ToString) -> Error {
    Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string()))
}

impl RunManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| invalid(&path, e))
    }

    /// Appends one record, rewriting the file atomically.
    pub fn append(root: &Path, record: StageRecord) -> Result<()> {
        let mut m = Self::load(root)?;
        m.records.push(record);
        let path = root.join(MANIFEST_FILE);
        let tmp = root.join(format!("{MANIFEST_FILE}{PARTIAL_SUFFIX}"));
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

/// The run root and how paths are resolved against it.
#[derive(Clone, Debug)]
pub struct RunRoot {
    pub root: PathBuf,
}

impl RunRoot {
    pub fn new(root: PathBuf) -> Result<Self> {
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).display().to_string()
    }
}

fn partial_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(PARTIAL_SUFFIX);
    PathBuf::from(s)
}

/// A stage writing into `<out>.partial`, promoted to `<out>` on success.
pub struct Stage {
    pub out: PathBuf,
    pub partial: PathBuf,
    started: u64,
}

impl Stage {
    /// Refuses an existing output unless `force` is set.
    pub fn begin(out: PathBuf, force: bool, is_dir: bool) -> Result<Self> {
        if out.exists() && !force {
            return Err(Error::config(format!("{} already exists; pass --force to overwrite it", out.display())));
        }
        let partial = partial_path(&out);
        if partial.is_dir() {
            fs::remove_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
        } else if partial.exists() {
            fs::remove_file(&partial).map_err(|e| Error::io(&partial, e))?;
        }
        if is_dir {
            fs::create_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
        } else if let Some(parent) = partial.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(Self { out, partial, started: now() })
    }

    /// Moves the finished output into place and records it in the manifest.
    pub fn commit(
        self,
        run: &RunRoot,
        stage: &str,
        config_hash: &str,
        inputs: &[&Path],
        metrics: serde_json::Value,
    ) -> Result<StageRecord> {
        let artifact_version = digest_path(&self.partial)?;
        if self.out.is_dir() {
            fs::remove_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        } else if self.out.exists() {
            fs::remove_file(&self.out).map_err(|e| Error::io(&self.out, e))?;
        }
        fs::rename(&self.partial, &self.out).map_err(|e| Error::io(&self.out, e))?;
        let record = StageRecord {
            stage: stage.to_owned(),
            config_hash: config_hash.to_owned(),
            artifact_version,
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            started: self.started,
            finished: now(),
            inputs: inputs.iter().map(|p| run.relative(p)).collect(),
            outputs: vec![run.relative(&self.out)],
            metrics,
        };
        RunManifest::append(&run.root, record.clone())?;
        Ok(record)
    }
}

fn collect_files(p: &Path, base: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
    if p.is_dir() {
        for entry in fs::read_dir(p).map_err(|e| Error::io(p, e))? {
            let entry = entry.map_err(|e| Error::io(p, e))?;
            collect_files(&entry.path(), base, out)?;
        }
    } else {
        let rel = p.strip_prefix(base).unwrap_or(p).display().to_string();
        out.push((rel, p.to_path_buf()));
    }
    Ok(())
}

/// SHA-256 over relative file names and contents, sorted by name; the
/// first 16 hex digits.
pub fn digest_path(p: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(p, p, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, path) in files {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(rel.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex_string(&h.finalize())[..16].to_owned())
}

/// Top-level entries of the run root not listed as an output of exactly one
/// manifest record (the manifest itself excluded).
pub fn orphans(root: &Path) -> Result<Vec<String>> {
    let m = RunManifest::load(root)?;
    let mut found = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == MANIFEST_FILE {
            continue;
        }
        let owners = m
            .records
            .iter()
            .filter(|r| r.outputs.iter().any(|o| o == &name || Path::new(o).starts_with(&name)))
            .count();
        if owners == 0 {
            found.push(name);
        }
    }
    found.sort();
    Ok(found)
}
