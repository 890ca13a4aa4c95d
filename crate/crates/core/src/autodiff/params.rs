//! Named parameters and checkpoints.
//!
//! A checkpoint is a directory holding one MVT1 file per parameter plus a
//! `manifest.json` listing `(name, dtype, shape, trainable, file)` for each.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_mvt1, write_mvt1, DType, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    trainable: bool,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new trainable parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(
            name,
            Param {
                value,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParam(name.to_owned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Replaces a value, keeping its shape contract.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_owned()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("param_set", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.params.len());
        for (name, p) in &self.params {
            let file = format!("{name}.mvt1");
            write_mvt1(dir.join(&file), &p.value, DType::F64)?;
            entries.push(ManifestEntry {
                name: name.clone(),
                dtype: DType::F64,
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
                file,
            });
        }
        let manifest = serde_json::to_string_pretty(&Manifest { params: entries })?;
        fs::write(dir.join("manifest.json"), manifest + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut store = ParamStore::new();
        for e in manifest.params {
            let (value, _) = read_mvt1(dir.join(&e.file))?;
            if value.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!(
                    "`{}`: manifest shape {:?} but file holds {:?}",
                    e.name,
                    e.shape,
                    value.shape()
                )));
            }
            store.insert(e.name.clone(), value)?;
            store
                .params
                .get_mut(&e.name)
                .expect("just inserted")
                .trainable = e.trainable;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::ones(&[2])).unwrap();
        assert!(s.insert("a", Tensor::ones(&[2])).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(2);
        let mut s = ParamStore::new();
        s.insert("enc.w", rng.normal_tensor(&[3, 4], 1.0)).unwrap();
        s.insert("lp.b", rng.normal_tensor(&[4], 1.0)).unwrap();
        s.set_trainable_prefix("enc.", false);
        s.save(dir.path()).unwrap();
        let back = ParamStore::load(dir.path()).unwrap();
        assert_eq!(back, s);
        assert!(!back.get("enc.w").unwrap().trainable);
        assert!(back.get("lp.b").unwrap().trainable);
    }
}
