//! Checkpoint directories: `config.json`, `vocab.json`, `manifest.json`,
//! `provenance.json` and `tensors.bin` (little-endian f64, manifest order).
//! Writes go to a sibling temporary directory that is renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Mat, ParamStore};
use crate::error::{Error, Result};
use crate::featurizer::Vocabulary;

use super::model::{ClassifierSpec, Model, ModelSpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: (usize, usize),
    /// Offset in f64 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub tensors: Vec<TensorEntry>,
    /// SHA-256 of `tensors.bin`, hex.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub spec: ModelSpec,
    pub classifier: Option<ClassifierSpec>,
}

/// Where a checkpoint came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub best_epoch: usize,
    /// Per-epoch losses or metrics, free-form.
    pub history: serde_json::Value,
    pub parent: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub vocab: Vocabulary,
    pub provenance: Provenance,
    pub manifest: Manifest,
    pub store: ParamStore,
}

impl Checkpoint {
    /// Short id derived from the tensor digest.
    pub fn id(&self) -> String {
        self.manifest.sha256[..16].to_string()
    }

    /// Binds the stored tensors to the recorded architecture.
    pub fn into_model(self) -> Result<Model> {
        Model::bind(&self.config.spec, self.store, self.config.classifier)
    }

    /// Binds the stored tensors to `spec`, reporting every missing or
    /// mis-shaped tensor by name.
    pub fn bind_to(&self, spec: &ModelSpec) -> Result<Model> {
        Model::bind(spec, self.store.clone(), None)
    }
}

fn tensor_bytes(store: &ParamStore) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut bytes = Vec::with_capacity(store.n_scalars() * 8);
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (name, value) in store.iter() {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: value.dim(),
            offset,
        });
        for v in value.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += value.len();
    }
    (bytes, entries)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Writes a checkpoint directory at `dir`, replacing any existing one.
pub fn save_checkpoint(dir: &Path, model: &Model, vocab: &Vocabulary, provenance: &Provenance) -> Result<PathBuf> {
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let name = dir
        .file_name()
        .ok_or_else(|| Error::invalid(format!("checkpoint path {} has no file name", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let (bytes, tensors) = tensor_bytes(&model.store);
    let manifest = Manifest {
        format: FORMAT_VERSION,
        tensors,
        sha256: sha256_hex(&bytes),
    };
    fs::write(tmp.join("tensors.bin"), &bytes)?;
    write_json(&tmp.join("manifest.json"), &manifest)?;
    write_json(
        &tmp.join("config.json"),
        &CheckpointConfig {
            spec: model.spec.clone(),
            classifier: model.classifier.as_ref().map(|c| c.spec.clone()),
        },
    )?;
    fs::write(tmp.join("vocab.json"), vocab.to_json()?)?;
    write_json(&tmp.join("provenance.json"), provenance)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(dir.to_path_buf())
}

/// Reads and validates a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {} (expected {FORMAT_VERSION})",
            manifest.format
        )));
    }
    let config: CheckpointConfig = read_json(&dir.join("config.json"))?;
    let provenance: Provenance = read_json(&dir.join("provenance.json"))?;
    let vocab = Vocabulary::from_json(&fs::read_to_string(dir.join("vocab.json"))?)
        .map_err(|e| Error::Checkpoint(format!("vocab.json: {e}")))?;
    let bytes = fs::read(dir.join("tensors.bin"))?;
    if sha256_hex(&bytes) != manifest.sha256 {
        return Err(Error::Checkpoint("tensors.bin does not match the manifest digest".into()));
    }
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("tensors.bin length is not a multiple of 8".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        let n = t.shape.0 * t.shape.1;
        let end = t.offset.checked_add(n).filter(|&e| e <= values.len()).ok_or_else(|| {
            Error::Checkpoint(format!("tensor {} extends past the end of tensors.bin", t.name))
        })?;
        if store.id(&t.name).is_some() {
            return Err(Error::Checkpoint(format!("tensor {} listed twice", t.name)));
        }
        let m = Mat::from_shape_vec(t.shape, values[t.offset..end].to_vec())
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", t.name)))?;
        store.add(t.name.clone(), m);
    }
    Ok(Checkpoint {
        config,
        vocab,
        provenance,
        manifest,
        store,
    })
}
