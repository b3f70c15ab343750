//! Output directory with an artifact manifest. Every file a command reads or
//! writes goes through [`Workspace`], so the manifest is a complete record
//! of the data each command touched.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";

/// Name of the previous-task training data. It exists only in memory during
/// pretraining and must never appear among artifacts or reads.
pub const PREVIOUS_TRAIN: &str = "prev.train";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub sha256: String,
    pub bytes: u64,
    /// Hash of the resolved config that produced the artifact.
    pub config: String,
    /// `command:label` that last wrote it.
    pub command: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub reads: BTreeSet<String>,
    pub writes: BTreeSet<String>,
    /// Data generated and consumed in memory, never persisted.
    pub ephemeral: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, ArtifactEntry>,
    /// Keyed by `command:label`, in key order.
    pub commands: BTreeMap<String, CommandRecord>,
}

impl Manifest {
    /// Checks that previous-task training data was only ever touched in
    /// memory by pretraining: no artifact holds it, no command read it, and
    /// every read of every command is a manifest artifact.
    pub fn audit_previous_train(&self) -> std::result::Result<(), String> {
        let is_prev_train = |p: &str| p.contains(PREVIOUS_TRAIN);
        if let Some(p) = self.artifacts.keys().find(|p| is_prev_train(p)) {
            return Err(format!("artifact `{p}` holds previous-task training data"));
        }
        for (key, rec) in &self.commands {
            if let Some(p) = rec.reads.iter().find(|p| is_prev_train(p)) {
                return Err(format!("`{key}` read `{p}`"));
            }
            if let Some(p) = rec.reads.iter().find(|p| !self.artifacts.contains_key(*p)) {
                return Err(format!("`{key}` read `{p}`, which is not a recorded artifact"));
            }
            if rec.ephemeral.iter().any(|p| is_prev_train(p)) && !key.starts_with("pretrain:") {
                return Err(format!("`{key}` used previous-task training data"));
            }
        }
        Ok(())
    }
}

pub struct Workspace {
    root: PathBuf,
    manifest: Manifest,
    /// Artifacts as recorded before this command started.
    recorded: BTreeMap<String, ArtifactEntry>,
    config_hash: String,
    key: String,
    record: CommandRecord,
}

fn rel(p: &str) -> String {
    p.replace('\\', "/")
}

impl Workspace {
    /// Opens (creating if needed) an output directory for one command.
    pub fn open(root: impl Into<PathBuf>, command: &str, label: &str, config_hash: &str) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| CliError::io(&root, e))?;
        let mpath = root.join(MANIFEST);
        let manifest = if mpath.exists() {
            let text = std::fs::read_to_string(&mpath).map_err(|e| CliError::io(&mpath, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::format(&mpath, e.to_string()))?
        } else {
            Manifest::default()
        };
        Ok(Self {
            root,
            recorded: manifest.artifacts.clone(),
            manifest,
            config_hash: config_hash.to_string(),
            key: format!("{command}:{label}"),
            record: CommandRecord::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn path(&self, rel_path: &str) -> PathBuf {
        self.root.join(rel_path)
    }

    pub fn exists(&self, rel_path: &str) -> bool {
        self.path(rel_path).exists()
    }

    /// Maps a user-supplied path to its manifest key (relative when inside
    /// the workspace).
    pub fn key_for(&self, path: &Path) -> String {
        let root = self.root.canonicalize().unwrap_or_else(|_| self.root.clone());
        let p = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
        match p.strip_prefix(&root) {
            Ok(r) => rel(&r.to_string_lossy()),
            Err(_) => rel(&path.to_string_lossy()),
        }
    }

    pub fn note_ephemeral(&mut self, what: &str) {
        self.record.ephemeral.insert(what.to_string());
    }

    pub fn read_bytes(&mut self, rel_path: &str) -> Result<Vec<u8>> {
        let p = self.path(rel_path);
        let bytes = std::fs::read(&p).map_err(|e| CliError::io(&p, e))?;
        self.record.reads.insert(rel(rel_path));
        Ok(bytes)
    }

    pub fn read_json<T: DeserializeOwned>(&mut self, rel_path: &str) -> Result<T> {
        let bytes = self.read_bytes(rel_path)?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::format(&self.path(rel_path), e.to_string()))
    }

    pub fn read_checkpoint(&mut self, rel_path: &str) -> Result<Checkpoint> {
        let bytes = self.read_bytes(rel_path)?;
        Checkpoint::from_bytes(&bytes).map_err(|e| CliError::format(&self.path(rel_path), e.to_string()))
    }

    /// Writes an artifact. When the same command with the same config
    /// wrote it before, the bytes must be identical.
    pub fn write_bytes(&mut self, rel_path: &str, bytes: &[u8]) -> Result<()> {
        let key = rel(rel_path);
        let sha = sha256_hex(bytes);
        if let Some(prev) = self.recorded.get(&key) {
            if prev.config == self.config_hash && prev.command == self.key && prev.sha256 != sha {
                return Err(CliError::Runtime(format!(
                    "non-reproducible artifact `{key}`: checksum {} differs from the recorded {}",
                    sha, prev.sha256
                )));
            }
        }
        let p = self.path(rel_path);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
        self.manifest.artifacts.insert(
            key.clone(),
            ArtifactEntry {
                sha256: sha,
                bytes: bytes.len() as u64,
                config: self.config_hash.clone(),
                command: self.key.clone(),
            },
        );
        self.record.writes.insert(key);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel_path: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        s.push('\n');
        self.write_bytes(rel_path, s.as_bytes())
    }

    pub fn write_checkpoint(&mut self, rel_path: &str, ckpt: &Checkpoint) -> Result<String> {
        let bytes = ckpt.to_bytes();
        self.write_bytes(rel_path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    /// Re-hashes every recorded artifact on disk.
    pub fn verify(&self) -> Result<()> {
        for (k, a) in &self.manifest.artifacts {
            let p = self.path(k);
            let bytes = std::fs::read(&p).map_err(|e| CliError::io(&p, e))?;
            if sha256_hex(&bytes) != a.sha256 {
                return Err(CliError::Runtime(format!("artifact `{k}` does not match the manifest")));
            }
        }
        Ok(())
    }

    /// Manifest hash of the artifact as recorded before this command.
    pub fn recorded_config(&self, rel_path: &str) -> Option<&str> {
        self.recorded.get(rel_path).map(|a| a.config.as_str())
    }

    /// Records this command and saves the manifest. Records of the same
    /// command accumulate, so a resumed run keeps what earlier runs wrote.
    pub fn finish(mut self) -> Result<Manifest> {
        let rec = self.manifest.commands.entry(self.key.clone()).or_default();
        rec.reads.extend(self.record.reads);
        rec.writes.extend(self.record.writes);
        rec.ephemeral.extend(self.record.ephemeral);
        let p = self.root.join(MANIFEST);
        let mut s = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        s.push('\n');
        std::fs::write(&p, s).map_err(|e| CliError::io(&p, e))?;
        Ok(self.manifest)
    }
}
