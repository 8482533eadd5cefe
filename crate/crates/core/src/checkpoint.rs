//! Directory checkpoints: one UATS snapshot per tensor plus a text manifest.
//!
//! Manifest lines are `key=value`. Tensor entries use the key
//! `tensor.<name>` with the sha256 of the snapshot bytes as value.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use sketchdit_tensor::{snapshot, Element, ParamStore, Tensor};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";
const TENSOR_PREFIX: &str = "tensor.";

/// Ordered key=value metadata plus the tensors to persist.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, String>,
}

impl Manifest {
    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Validation(format!("manifest is missing key {key}")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Validation(format!("manifest key {key} has unparsable value {v:?}")))
    }
}

fn file_name(tensor: &str) -> String {
    let safe: String = tensor
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.uats")
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct Writer {
    dir: PathBuf,
    manifest: Manifest,
}

impl Writer {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), manifest: Manifest::default() })
    }

    pub fn meta(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.manifest.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn tensor<E: Element>(&mut self, name: &str, t: &Tensor<E>) -> Result<()> {
        let bytes = snapshot::encode(t)?;
        let path = self.dir.join(file_name(name));
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        self.manifest.tensors.insert(name.to_string(), digest(&bytes));
        Ok(())
    }

    pub fn store<E: Element>(&mut self, prefix: &str, store: &ParamStore<E>) -> Result<()> {
        for (_, p) in store.iter() {
            self.tensor(&format!("{prefix}{}", p.name), &p.value)?;
        }
        Ok(())
    }

    /// Writes the manifest last so a partial directory never looks complete.
    pub fn finish(self) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.manifest.meta {
            text.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in &self.manifest.tensors {
            text.push_str(&format!("{TENSOR_PREFIX}{k}={v}\n"));
        }
        let path = self.dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

pub struct Reader {
    dir: PathBuf,
    pub manifest: Manifest,
}

impl Reader {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut manifest = Manifest::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Validation(format!("{}: line {} is not key=value", path.display(), i + 1))
            })?;
            match k.strip_prefix(TENSOR_PREFIX) {
                Some(name) => manifest.tensors.insert(name.to_string(), v.to_string()),
                None => manifest.meta.insert(k.to_string(), v.to_string()),
            };
        }
        Ok(Self { dir: dir.to_path_buf(), manifest })
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.manifest.tensors.contains_key(name)
    }

    /// Loads and verifies one tensor; any mismatch names the tensor.
    pub fn tensor<E: Element>(&self, name: &str) -> Result<Tensor<E>> {
        let integrity = |msg: String| Error::Integrity { tensor: name.to_string(), msg };
        let expected = self
            .manifest
            .tensors
            .get(name)
            .ok_or_else(|| integrity("not listed in manifest".into()))?;
        let path = self.dir.join(file_name(name));
        let bytes = fs::read(&path).map_err(|e| integrity(format!("{}: {e}", path.display())))?;
        let got = digest(&bytes);
        if &got != expected {
            return Err(integrity(format!("checksum {got} does not match manifest {expected}")));
        }
        snapshot::decode(&bytes).map_err(|e| integrity(e.to_string()))
    }

    /// Fills every parameter of `store` from `<prefix><name>` entries.
    pub fn load_store<E: Element>(&self, prefix: &str, store: &mut ParamStore<E>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.param(id).name);
            let t = self.tensor::<E>(&name)?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Integrity {
                    tensor: name,
                    msg: format!("shape {:?}, expected {:?}", t.shape(), store.get(id).shape()),
                });
            }
            *store.get_mut(id) = t;
        }
        Ok(())
    }
}
