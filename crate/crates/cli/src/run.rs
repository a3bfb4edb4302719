//! Run directories, artifact hashing and the run manifest.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Fail;

/// Environment variable naming the default output root.
pub const OUT_ROOT_VAR: &str = "PRUNAS_OUT_ROOT";
const DEFAULT_ROOT: &str = "runs";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, Fail> {
    let bytes = std::fs::read(path).map_err(|e| Fail::input(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

impl InputFile {
    pub fn hash(path: &Path) -> Result<Self, Fail> {
        Ok(InputFile {
            path: path.display().to_string(),
            sha256: file_sha256(path)?,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    /// SHA-256 of `config.json` as written.
    pub config_hash: String,
    pub inputs: Vec<InputFile>,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<Artifact>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// An output directory that records every file written into it.
pub struct Run {
    dir: PathBuf,
    command: String,
    config: serde_json::Value,
    config_hash: String,
    inputs: Vec<InputFile>,
    seeds: Vec<u64>,
    started: u64,
    artifacts: Vec<Artifact>,
}

pub struct RunSpec<'a> {
    pub command: &'a str,
    /// Canonical config text; stored as `config.json`.
    pub config_text: String,
    pub inputs: Vec<InputFile>,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub force: bool,
}

impl Run {
    /// Opens `out`, or `<root>/<command>-<hash prefix>` where the hash covers
    /// the config and every input. Refuses a non-empty directory unless
    /// `force` is set, in which case the old contents are removed.
    pub fn open(spec: RunSpec) -> Result<Self, Fail> {
        let config_hash = sha256_hex(spec.config_text.as_bytes());
        let dir = match spec.out {
            Some(d) => d,
            None => {
                let mut key = config_hash.clone();
                for i in &spec.inputs {
                    key.push_str(&i.sha256);
                }
                let root = std::env::var_os(OUT_ROOT_VAR)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT));
                root.join(format!("{}-{}", spec.command, &sha256_hex(key.as_bytes())[..12]))
            }
        };
        let occupied = std::fs::read_dir(&dir)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if occupied {
            if !spec.force {
                return Err(Fail::input(format!(
                    "{} already holds a run; pass --force to overwrite",
                    dir.display()
                )));
            }
            std::fs::remove_dir_all(&dir).map_err(|e| Fail::runtime(format!("{}: {e}", dir.display())))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Fail::runtime(format!("{}: {e}", dir.display())))?;
        let config: serde_json::Value = serde_json::from_str(&spec.config_text)
            .map_err(|e| Fail::runtime(format!("config is not JSON: {e}")))?;
        let mut run = Run {
            dir,
            command: spec.command.to_string(),
            config,
            config_hash,
            inputs: spec.inputs,
            seeds: spec.seeds,
            started: now(),
            artifacts: Vec::new(),
        };
        run.write("config.json", spec.config_text.as_bytes())?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, Fail> {
        let p = self.path(name);
        std::fs::write(&p, bytes).map_err(|e| Fail::runtime(format!("{}: {e}", p.display())))?;
        self.record(name)?;
        Ok(p)
    }

    /// Adds a file already written under the run directory.
    pub fn record(&mut self, name: &str) -> Result<(), Fail> {
        let p = self.path(name);
        let bytes = std::fs::read(&p).map_err(|e| Fail::runtime(format!("{}: {e}", p.display())))?;
        self.artifacts.retain(|a| a.file != name);
        self.artifacts.push(Artifact {
            file: name.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Writes `manifest.json` listing every artifact.
    pub fn finish(self) -> Result<PathBuf, Fail> {
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            config_hash: self.config_hash,
            inputs: self.inputs,
            seeds: self.seeds,
            output_dir: self.dir.display().to_string(),
            started_unix: self.started,
            finished_unix: now(),
            artifacts: self.artifacts,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Fail::runtime(e.to_string()))? + "\n";
        let p = self.dir.join("manifest.json");
        std::fs::write(&p, text).map_err(|e| Fail::runtime(format!("{}: {e}", p.display())))?;
        Ok(self.dir)
    }
}
