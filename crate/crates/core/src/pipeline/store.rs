//! On-disk artifacts: one raw little-endian f32 payload file per stage and a
//! JSON manifest describing every tensor in it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::ParamStore;
use crate::error::{GcavError, Result};
use crate::tensor::Tensor;

/// Stage names in execution order.
pub const STAGES: [&str; 9] = [
    "gen", "target", "cavs", "ae", "align", "fuse", "score", "attack", "report",
];

pub const MANIFEST: &str = "manifest.json";

pub fn stage_index(stage: &str) -> Result<usize> {
    STAGES
        .iter()
        .position(|s| *s == stage)
        .ok_or_else(|| GcavError::InvalidConfig(format!("unknown stage `{stage}`")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub byte_offset: u64,
    pub stage: String,
    /// Hex SHA-256 of the entry's bytes.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    /// Completed stages in execution order.
    pub completed: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn payload_name(stage: &str) -> String {
    format!("{stage}.f32")
}

#[derive(Debug)]
pub struct ArtifactStore {
    root: PathBuf,
    manifest: Manifest,
}

/// Tensors produced by one stage, committed together.
#[derive(Debug)]
pub struct StageWriter {
    stage: String,
    tensors: Vec<(String, Tensor)>,
}

impl StageWriter {
    pub fn put(&mut self, key: impl Into<String>, t: Tensor) {
        self.tensors.push((key.into(), t));
    }

    /// Every parameter of `store` under `prefix/<param name>`.
    pub fn put_params(&mut self, prefix: &str, store: &ParamStore) {
        for (_, name, t) in store.iter() {
            self.put(format!("{prefix}/{name}"), t.clone());
        }
    }
}

impl ArtifactStore {
    /// Opens `root`, keeping an existing manifest only if it was written under
    /// the same config hash.
    pub fn open(root: &Path, config_hash: &str) -> Result<Self> {
        fs::create_dir_all(root).map_err(GcavError::io(root))?;
        let path = root.join(MANIFEST);
        let manifest = if path.exists() {
            let text = fs::read_to_string(&path).map_err(GcavError::io(&path))?;
            let m: Manifest = serde_json::from_str(&text).map_err(|source| GcavError::Json {
                path: path.clone(),
                source,
            })?;
            if m.config_hash == config_hash {
                m
            } else {
                Manifest {
                    config_hash: config_hash.to_string(),
                    ..Manifest::default()
                }
            }
        } else {
            Manifest {
                config_hash: config_hash.to_string(),
                ..Manifest::default()
            }
        };
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    /// Opens `root` with every previous artifact discarded.
    pub fn create(root: &Path, config_hash: &str) -> Result<Self> {
        let mut store = Self::open(root, config_hash)?;
        store.invalidate_from(0)?;
        store.save()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn is_complete(&self, stage: &str) -> bool {
        self.manifest.completed.iter().any(|s| s == stage)
    }

    pub fn entry(&self, key: &str) -> Option<&ManifestEntry> {
        self.manifest.entries.iter().find(|e| e.name == key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entry(key).is_some()
    }

    pub fn writer(&self, stage: &str) -> Result<StageWriter> {
        stage_index(stage)?;
        Ok(StageWriter {
            stage: stage.to_string(),
            tensors: Vec::new(),
        })
    }

    fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST);
        let tmp = self.root.join(format!("{MANIFEST}.tmp"));
        let text =
            serde_json::to_string_pretty(&self.manifest).expect("manifest serialises") + "\n";
        fs::write(&tmp, text).map_err(GcavError::io(&tmp))?;
        fs::rename(&tmp, &path).map_err(GcavError::io(&path))
    }

    /// Drops every artifact and completion mark of stage `from` and later.
    fn invalidate_from(&mut self, from: usize) -> Result<()> {
        let later = |s: &str| stage_index(s).map_or(true, |i| i >= from);
        self.manifest.entries.retain(|e| !later(&e.stage));
        self.manifest.completed.retain(|s| !later(s));
        for stage in &STAGES[from..] {
            let path = self.root.join(payload_name(stage));
            if path.exists() {
                fs::remove_file(&path).map_err(GcavError::io(&path))?;
            }
        }
        Ok(())
    }

    /// Writes a stage's payload, marks it complete and invalidates every later
    /// stage. Earlier stages' files are never touched.
    pub fn commit(&mut self, w: StageWriter) -> Result<()> {
        let idx = stage_index(&w.stage)?;
        self.invalidate_from(idx)?;
        let file = payload_name(&w.stage);
        let mut bytes = Vec::new();
        for (name, t) in &w.tensors {
            if self.contains(name) {
                return Err(GcavError::invalid(
                    "commit",
                    format!("duplicate artifact `{name}`"),
                ));
            }
            let start = bytes.len();
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            self.manifest.entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                file: file.clone(),
                byte_offset: start as u64,
                stage: w.stage.clone(),
                checksum: sha256_hex(&bytes[start..]),
            });
        }
        if !bytes.is_empty() {
            let path = self.root.join(&file);
            fs::write(&path, &bytes).map_err(GcavError::io(&path))?;
        }
        self.manifest.completed.push(w.stage);
        self.save()
    }

    fn load_entry(&self, e: &ManifestEntry) -> Result<Tensor> {
        let path = self.root.join(&e.file);
        let bytes = fs::read(&path).map_err(GcavError::io(&path))?;
        let n: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let slice = bytes
            .get(start..start + 4 * n)
            .ok_or_else(|| GcavError::Checksum(e.name.clone()))?;
        if sha256_hex(slice) != e.checksum {
            return Err(GcavError::Checksum(e.name.clone()));
        }
        let data = slice
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor::new(&e.shape, data)?)
    }

    /// Loads `key` on behalf of stage `reader`, which may only read artifacts
    /// of strictly earlier stages.
    pub fn read(&self, reader: &str, key: &str) -> Result<Tensor> {
        let r = stage_index(reader)?;
        let e = self
            .entry(key)
            .ok_or_else(|| GcavError::MissingArtifact(key.to_string()))?;
        if stage_index(&e.stage)? >= r {
            return Err(GcavError::StageOrder {
                reader: reader.to_string(),
                writer: e.stage.clone(),
                key: key.to_string(),
            });
        }
        self.load_entry(e)
    }

    /// Fails with the key if no artifact lives under `prefix`.
    pub fn require(&self, prefix: &str) -> Result<()> {
        let nested = format!("{prefix}/");
        if self
            .manifest
            .entries
            .iter()
            .any(|e| e.name == prefix || e.name.starts_with(&nested))
        {
            Ok(())
        } else {
            Err(GcavError::MissingArtifact(prefix.to_string()))
        }
    }

    /// Overwrites every parameter of `store` from `prefix/<param name>`.
    pub fn read_params(&self, reader: &str, prefix: &str, store: &mut ParamStore) -> Result<()> {
        self.require(prefix)?;
        let values = store
            .iter()
            .map(|(_, name, _)| self.read(reader, &format!("{prefix}/{name}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(store.load(values)?)
    }

    /// Re-hashes every entry.
    pub fn verify(&self) -> Result<()> {
        for e in &self.manifest.entries {
            self.load_entry(e)?;
        }
        Ok(())
    }
}
