//! Checkpoints: a directory of OTEN tensors plus `manifest.json` listing
//! parameter names, shapes, file names and a SHA-256 hash of the model
//! configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::nn::ParamStore;
use super::oten;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Hex SHA-256 of the serialized model configuration.
    pub config_hash: String,
    /// The configuration itself, for inspection and reloading.
    pub config: serde_json::Value,
    pub params: Vec<ManifestEntry>,
    /// Free-form metadata such as the training step or validation score.
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

/// Hex SHA-256 of the compact JSON encoding of `config`.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn file_name(index: usize, name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{index:04}_{safe}.oten")
}

/// Writes every parameter of `store` into `dir` (created if missing).
pub fn save<C: Serialize>(
    dir: impl AsRef<Path>,
    store: &ParamStore,
    config: &C,
    meta: serde_json::Map<String, serde_json::Value>,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(store.len());
    for (id, p) in store.iter() {
        let file = file_name(id.index(), &p.name);
        oten::write(dir.join(&file), &p.value)?;
        params.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        config_hash: config_hash(config)?,
        config: serde_json::to_value(config)?,
        params,
        meta,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.version != FORMAT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {}", m.version)));
    }
    Ok(m)
}

/// Loads tensors into an already-built `store` whose parameter names and
/// shapes must match the manifest exactly. With `expected_config`, the
/// config hash must match too.
pub fn load<C: Serialize>(dir: impl AsRef<Path>, store: &mut ParamStore, expected_config: Option<&C>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    if let Some(cfg) = expected_config {
        let h = config_hash(cfg)?;
        if h != m.config_hash {
            return Err(Error::Config(format!(
                "checkpoint config hash {} does not match the requested config {h}",
                m.config_hash
            )));
        }
    }
    if m.params.len() != store.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} parameters, model has {}",
            m.params.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, entry) in ids.into_iter().zip(&m.params) {
        let p = store.param(id);
        if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
            return Err(Error::Data(format!(
                "parameter {} {:?} does not match checkpoint entry {} {:?}",
                p.name,
                p.value.shape(),
                entry.name,
                entry.shape
            )));
        }
        let t = oten::read(dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Data(format!("{} holds shape {:?}, manifest says {:?}", entry.file, t.shape(), entry.shape)));
        }
        *store.get_mut(id) = t;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::new([2, 3], vec![0.5, -1.25, 2.0, 3.0, 0.0, -7.5]).unwrap());
        s.add("a/bias", Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        s
    }

    #[test]
    fn round_trip_and_hash_checks() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = serde_json::json!({"dim": 3});
        let original = store();
        let m = save(dir.path(), &original, &cfg, Default::default()).unwrap();
        assert_eq!(m.params[1].file, "0001_a_bias.oten");
        assert_eq!(m.config_hash.len(), 64);

        let mut target = store();
        for id in target.ids().collect::<Vec<_>>() {
            target.get_mut(id).data_mut().fill(9.0);
        }
        load(dir.path(), &mut target, Some(&cfg)).unwrap();
        for id in original.ids() {
            assert_eq!(original.get(id), target.get(id));
        }
        let other = serde_json::json!({"dim": 4});
        assert!(matches!(load(dir.path(), &mut target, Some(&other)), Err(Error::Config(_))));
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &store(), &0, Default::default()).unwrap();
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::zeros([3, 2]));
        s.add("a/bias", Tensor::zeros([3]));
        assert!(matches!(load::<u8>(dir.path(), &mut s, None), Err(Error::Data(_))));
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::zeros([2, 3]));
        assert!(matches!(load::<u8>(dir.path(), &mut s, None), Err(Error::Data(_))));
    }

    #[test]
    fn hash_is_stable() {
        // Reference digest of the bytes `{"a":1}` from sha256sum.
        let h = config_hash(&serde_json::json!({"a": 1})).unwrap();
        assert_eq!(h, "015abd7f5cc57a2dd94b7590f04ad8084273905ee33ec5cebeae62276a97f862");
    }
}
