//! On-disk artifact registry: a directory tree plus `manifest.json`, which
//! records for every completed stage the digest of its configuration and
//! inputs and the SHA-256 of each file it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::sha256_hex;
use crate::error::{Error, Result};

pub const REGISTRY_FILE: &str = "manifest.json";
const REGISTRY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Path relative to the registry root, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Digest of the stage's own configuration section.
    pub config_digest: String,
    /// Digest over the stage name, configuration and upstream output digests.
    pub stage_digest: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<ArtifactRecord>,
    /// Stage-specific facts worth reading back without loading artifacts.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub summary: serde_json::Value,
}

impl StageRecord {
    /// Digest over the output file digests, used by downstream stages.
    pub fn output_digest(&self) -> String {
        let joined: Vec<String> = self.outputs.iter().map(|o| format!("{}:{}", o.path, o.sha256)).collect();
        sha256_hex(joined.join("\n").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub config_digest: String,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug)]
pub struct Registry {
    root: PathBuf,
    pub manifest: RunManifest,
}

fn file_digest(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((sha256_hex(&bytes), bytes.len() as u64))
}

fn collect_files(root: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let full = root.join(rel);
    if full.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&full)
            .map_err(|e| Error::io(&full, e))?
            .map(|e| e.map(|e| rel.join(e.file_name())).map_err(|err| Error::io(&full, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for e in entries {
            collect_files(root, &e, out)?;
        }
    } else {
        out.push(rel.to_path_buf());
    }
    Ok(())
}

fn rel_string(p: &Path) -> String {
    p.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

impl Registry {
    /// Opens the registry under `root`, creating the directory. An existing
    /// manifest is kept even when the run configuration changed: stages are
    /// invalidated individually by their own digests.
    pub fn open(root: &Path, config_digest: &str) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(REGISTRY_FILE);
        let manifest = if path.exists() {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let mut m: RunManifest = serde_json::from_slice(&bytes)?;
            if m.version != REGISTRY_VERSION {
                return Err(Error::Format(format!(
                    "{}: registry version {} unsupported (expected {REGISTRY_VERSION})",
                    path.display(),
                    m.version
                )));
            }
            m.config_digest = config_digest.to_string();
            m
        } else {
            RunManifest { version: REGISTRY_VERSION, config_digest: config_digest.to_string(), stages: BTreeMap::new() }
        };
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.manifest.stages.get(name)
    }

    /// Whether `name` completed with `stage_digest` and its files are unchanged.
    pub fn is_current(&self, name: &str, stage_digest: &str) -> bool {
        let Some(rec) = self.stage(name) else { return false };
        rec.stage_digest == stage_digest
            && rec.outputs.iter().all(|o| {
                file_digest(&self.path(&o.path)).is_ok_and(|(sha, bytes)| sha == o.sha256 && bytes == o.bytes)
            })
    }

    /// Hashes every file under each output path and records the stage.
    pub fn record(
        &mut self,
        name: &str,
        config_digest: String,
        stage_digest: String,
        inputs: Vec<String>,
        outputs: &[&str],
        summary: serde_json::Value,
    ) -> Result<&StageRecord> {
        let mut files = Vec::new();
        for o in outputs {
            collect_files(&self.root, Path::new(o), &mut files)?;
        }
        let outputs = files
            .iter()
            .map(|rel| {
                let (sha256, bytes) = file_digest(&self.root.join(rel))?;
                Ok(ArtifactRecord { path: rel_string(rel), sha256, bytes })
            })
            .collect::<Result<Vec<_>>>()?;
        self.manifest
            .stages
            .insert(name.to_string(), StageRecord { config_digest, stage_digest, inputs, outputs, summary });
        self.save()?;
        Ok(&self.manifest.stages[name])
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(REGISTRY_FILE);
        let tmp = self.root.join(format!("{REGISTRY_FILE}.tmp"));
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        std::fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}
