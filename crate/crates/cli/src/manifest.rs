//! Record of produced artifacts, keyed by stage, with content hashes of the
//! stage inputs and outputs. A stage whose input hash and outputs are
//! unchanged is skipped on rerun.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fracal::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub input_hash: String,
    /// Output path relative to the output directory, with its SHA-256.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub stages: BTreeMap<String, StageEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            version: 1,
            stages: BTreeMap::new(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Hash over labelled parts, order sensitive.
pub fn combine_hash(parts: &[(&str, &str)]) -> String {
    let mut h = Sha256::new();
    for (k, v) in parts {
        h.update((k.len() as u64).to_le_bytes());
        h.update(k.as_bytes());
        h.update((v.len() as u64).to_le_bytes());
        h.update(v.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Workspace {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Workspace {
    pub fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        let path = root.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            serde_json::from_str(&std::fs::read_to_string(&path)?)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        } else {
            Manifest::default()
        };
        Ok(Workspace {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// True when `stage` already ran with `input_hash` and its outputs are
    /// intact on disk.
    pub fn is_current(&self, stage: &str, input_hash: &str) -> bool {
        self.manifest.stages.get(stage).is_some_and(|e| {
            e.input_hash == input_hash
                && e
                    .outputs
                    .iter()
                    .all(|(rel, h)| file_hash(&self.path(rel)).is_ok_and(|got| &got == h))
        })
    }

    /// Hash of a previously recorded stage's outputs, used as an input of
    /// downstream stages.
    pub fn stage_fingerprint(&self, stage: &str) -> Result<String> {
        let e = self
            .manifest
            .stages
            .get(stage)
            .ok_or_else(|| Error::Config(format!("stage `{stage}` has not been run in {}", self.root.display())))?;
        let parts: Vec<(&str, &str)> = e.outputs.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        Ok(combine_hash(&parts))
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(p, bytes)?;
        Ok(())
    }

    pub fn record(&mut self, stage: &str, input_hash: String, outputs: &[String], notes: BTreeMap<String, String>) -> Result<()> {
        let mut map = BTreeMap::new();
        for rel in outputs {
            map.insert(rel.clone(), file_hash(&self.path(rel))?);
        }
        self.manifest.stages.insert(
            stage.to_string(),
            StageEntry {
                input_hash,
                outputs: map,
                notes,
            },
        );
        self.save()
    }

    fn save(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(self.path(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}
