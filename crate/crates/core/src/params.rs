//! Named parameter tensors with per-tensor trainable flags, plus the on-disk
//! checkpoint format: one raw little-endian `f32` file per tensor and a
//! `manifest.json` describing them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MsnError, Result};
use crate::tensor::{Real, Tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T> {
    params: BTreeMap<String, Param<T>>,
}

/// Gradients keyed by tensor name.
pub type NamedGrads<T> = BTreeMap<String, Tensor<T>>;

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) {
        self.params
            .insert(name.into(), Param { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| MsnError::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| MsnError::MissingTensor(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| MsnError::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn freeze(mut self) -> Self {
        self.set_trainable(false);
        self
    }

    /// Errors unless every tensor is frozen.
    pub fn ensure_frozen(&self) -> Result<()> {
        match self.params.iter().find(|(_, p)| p.trainable) {
            Some((name, _)) => Err(MsnError::NotFrozen(name.clone())),
            None => Ok(()),
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// SHA-256 over name, shape and native bytes of every frozen tensor.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(_, p)| !p.trainable) {
            hash_tensor(&mut h, name, &p.tensor);
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over every tensor regardless of flag.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            hash_tensor(&mut h, name, &p.tensor);
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Adds every tensor of `other` under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParameterStore<T>) {
        for (k, p) in &other.params {
            self.params.insert(format!("{prefix}{k}"), p.clone());
        }
    }

    /// The tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn extract_prefixed(&self, prefix: &str) -> ParameterStore<T> {
        ParameterStore {
            params: self
                .params
                .iter()
                .filter_map(|(k, p)| k.strip_prefix(prefix).map(|s| (s.to_string(), p.clone())))
                .collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(self, dir, &BTreeMap::new())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        load_checkpoint(dir)
    }
}

fn hash_tensor<T: Real>(h: &mut Sha256, name: &str, t: &Tensor<T>) {
    h.update(name.as_bytes());
    h.update([0u8]);
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    h.update(t.to_le_bytes());
}

/// Kaiming (He) normal initialisation: `N(0, 2 / fan_in)`.
pub fn kaiming_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("matching length")
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub trainable: bool,
    /// SHA-256 of the stored bytes.
    pub checksum: String,
}

pub type Manifest = BTreeMap<String, ManifestEntry>;

fn file_name(name: &str) -> String {
    format!("{}.bin", name.replace('/', "_"))
}

/// Writes `store` (and any `extra` plain tensors such as cached vectors) as `f32`.
pub fn save_checkpoint<T: Real>(
    store: &ParameterStore<T>,
    dir: &Path,
    extra: &BTreeMap<String, Tensor<T>>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MsnError::io(dir, e))?;
    let mut manifest = Manifest::new();
    let entries = store
        .params
        .iter()
        .map(|(k, p)| (k, &p.tensor, p.trainable))
        .chain(extra.iter().map(|(k, t)| (k, t, false)));
    for (name, tensor, trainable) in entries {
        let bytes: Vec<u8> = tensor
            .data()
            .iter()
            .flat_map(|v| v.as_f32().to_le_bytes())
            .collect();
        let file = file_name(name);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| MsnError::io(&path, e))?;
        manifest.insert(
            name.clone(),
            ManifestEntry {
                file,
                shape: tensor.shape().to_vec(),
                dtype: "f32".into(),
                trainable,
                checksum: hex::encode(Sha256::digest(&bytes)),
            },
        );
    }
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| MsnError::json(&path, e))?;
    fs::write(&path, json).map_err(|e| MsnError::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| MsnError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| MsnError::json(&path, e))
}

fn read_tensor<T: Real>(dir: &Path, entry: &ManifestEntry) -> Result<Tensor<T>> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| MsnError::io(&path, e))?;
    if hex::encode(Sha256::digest(&bytes)) != entry.checksum {
        return Err(MsnError::Corrupt {
            path,
            reason: "checksum mismatch".into(),
        });
    }
    if entry.dtype != "f32" || bytes.len() % 4 != 0 {
        return Err(MsnError::Corrupt {
            path,
            reason: format!("unsupported dtype {} / length {}", entry.dtype, bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::from_vec(&entry.shape, data)
}

/// Loads every manifest entry as a parameter.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<ParameterStore<T>> {
    let manifest = read_manifest(dir)?;
    let mut store = ParameterStore::new();
    for (name, entry) in &manifest {
        store.insert(name.clone(), read_tensor(dir, entry)?, entry.trainable);
    }
    Ok(store)
}

/// Loads a single named tensor from a checkpoint directory.
pub fn load_tensor<T: Real>(dir: &Path, name: &str) -> Result<Tensor<T>> {
    let manifest = read_manifest(dir)?;
    let entry = manifest
        .get(name)
        .ok_or_else(|| MsnError::MissingTensor(name.to_string()))?;
    read_tensor(dir, entry)
}

/// SHA-256 over a checkpoint's manifest and every tensor file it lists.
pub fn checkpoint_digest(dir: &Path) -> Result<String> {
    let manifest = read_manifest(dir)?;
    let mut h = Sha256::new();
    let path = dir.join(MANIFEST);
    h.update(fs::read(&path).map_err(|e| MsnError::io(&path, e))?);
    for entry in manifest.values() {
        let path = dir.join(&entry.file);
        h.update(fs::read(&path).map_err(|e| MsnError::io(&path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}
