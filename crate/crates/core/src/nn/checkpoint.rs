//! Checkpoint container: one raw little-endian `float32` blob holding every
//! parameter back to back, plus a JSON index with names, shapes, offsets and
//! an echo of the model configuration.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Array;
use crate::error::{Error, Result};
use crate::io;

pub const FORMAT: &str = "lldm-checkpoint/1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the blob.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format: String,
    pub dtype: String,
    pub arrays: Vec<ArrayEntry>,
    pub config: serde_json::Value,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.bin")), dir.join(format!("{stem}.json")))
}

pub fn exists(dir: &Path, stem: &str) -> bool {
    let (bin, json) = paths(dir, stem);
    bin.is_file() && json.is_file()
}

pub fn save<C: Serialize>(
    dir: &Path,
    stem: &str,
    params: &ParamSet<f32>,
    config: &C,
    meta: serde_json::Value,
) -> Result<()> {
    io::create_dir(dir)?;
    let (bin, json) = paths(dir, stem);
    let mut blob = Vec::with_capacity(params.numel());
    let mut arrays = Vec::with_capacity(params.len());
    for (name, v) in params.iter() {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: v.shape().to_vec(),
            offset: blob.len(),
            len: v.len(),
        });
        blob.extend_from_slice(v.data());
    }
    let index = CheckpointIndex {
        format: FORMAT.into(),
        dtype: "float32".into(),
        arrays,
        config: serde_json::to_value(config).map_err(|e| Error::json(&json, e))?,
        meta,
    };
    io::write_f32(&bin, &blob)?;
    io::write_json(&json, &index)
}

pub struct Loaded {
    pub index: CheckpointIndex,
    pub params: ParamSet<f32>,
}

impl Loaded {
    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.index.config.clone()).map_err(|e| Error::json("<checkpoint config>", e))
    }

    /// Copies every stored array into `target`, which must have the same names and shapes.
    pub fn restore_into(&self, target: &mut ParamSet<f32>) -> Result<()> {
        if target.names() != self.params.names() {
            return Err(Error::Shape(format!(
                "checkpoint holds {} arrays, model expects {} (names differ)",
                self.params.len(),
                target.len()
            )));
        }
        for (name, v) in self.params.iter() {
            let expected = target.by_name(name).map(|a| a.shape().to_vec());
            if expected.as_deref() != Some(v.shape()) {
                return Err(Error::Shape(format!(
                    "{name}: checkpoint shape {:?}, model {:?}",
                    v.shape(),
                    expected
                )));
            }
            target.set_by_name(name, v.clone());
        }
        Ok(())
    }
}

pub fn load(dir: &Path, stem: &str) -> Result<Loaded> {
    let (bin, json) = paths(dir, stem);
    let index: CheckpointIndex = io::read_json(&json)?;
    if index.format != FORMAT || index.dtype != "float32" {
        return Err(Error::Format {
            path: json,
            message: format!("unsupported checkpoint {} / {}", index.format, index.dtype),
        });
    }
    let blob = io::read_f32(&bin)?;
    let mut params = ParamSet::new();
    for e in &index.arrays {
        let end = e.offset + e.len;
        if end > blob.len() || e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Format {
                path: bin,
                message: format!("array {} out of range", e.name),
            });
        }
        params.add(e.name.clone(), Array::from_vec(&e.shape, blob[e.offset..end].to_vec()));
    }
    Ok(Loaded { index, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv, ConvGeom};
    use crate::rng::seeded;

    #[test]
    fn save_load_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::<f32>::new();
        Conv::new(&mut ps, &mut seeded(3), "c", 2, 4, ConvGeom::cube(3, 2));
        save(dir.path(), "w", &ps, &serde_json::json!({"k": 1}), serde_json::Value::Null).unwrap();
        let loaded = load(dir.path(), "w").unwrap();
        assert_eq!(loaded.params.checksum(), ps.checksum());
        let mut other = ParamSet::<f32>::new();
        Conv::new(&mut other, &mut seeded(4), "c", 2, 4, ConvGeom::cube(3, 2));
        loaded.restore_into(&mut other).unwrap();
        assert_eq!(other.checksum(), ps.checksum());
        let mut wrong = ParamSet::<f32>::new();
        Conv::new(&mut wrong, &mut seeded(4), "c", 3, 4, ConvGeom::cube(3, 2));
        assert!(loaded.restore_into(&mut wrong).is_err());
    }
}
