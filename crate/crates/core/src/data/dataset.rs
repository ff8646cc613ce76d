//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/volumes/<id>.f32  + <id>.json   little-endian float32, (H, W, D) row-major
//! <root>/labels/<id>.u8    + <id>.json   uint8 class indices, same layout
//! ```
//!
//! Sidecars carry `shape`, `dtype` and (for labels) `class_names`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::grid::{Grid3, LabelMap, Volume, CLASS_NAMES};
use super::phantom::{generate_phantom, PhantomSpec};
use crate::error::{Error, Result};
use crate::io;
use crate::rng::derive;

pub const MANIFEST_FORMAT: &str = "lldm-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Phantom,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    /// 504 / 72 / 144 of 720.
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        let sum: f64 = parts.iter().sum();
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("split ratios {parts:?} must be in [0,1] and sum to 1")));
        }
        Ok(())
    }

    /// `(train, val, test)` counts: val and test are floored (at least one
    /// each when their ratio is positive), train takes the remainder.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let part = |r: f64| {
            if r <= 0.0 {
                0
            } else {
                ((n as f64 * r + 1e-9).floor() as usize).max(1)
            }
        };
        let (val, test) = (part(self.val), part(self.test));
        (n - val - test, val, test)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Path of the volume array, relative to the manifest directory.
    pub volume: String,
    pub label: String,
    pub split: Split,
    pub provenance: Provenance,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub ratios: SplitRatios,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<PhantomSpec>,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    dtype: String,
    byte_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
}

fn sidecar_path(array: &Path) -> PathBuf {
    array.with_extension("json")
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    if let Some(dir) = path.parent() {
        io::create_dir(dir)?;
    }
    io::write_f32(path, v.data())?;
    io::write_json(
        &sidecar_path(path),
        &Sidecar {
            shape: v.shape(),
            dtype: "float32".into(),
            byte_order: "little".into(),
            class_names: None,
        },
    )
}

pub fn write_labels(path: &Path, l: &LabelMap) -> Result<()> {
    if let Some(dir) = path.parent() {
        io::create_dir(dir)?;
    }
    io::write_u8(path, l.data())?;
    io::write_json(
        &sidecar_path(path),
        &Sidecar {
            shape: l.shape(),
            dtype: "uint8".into(),
            byte_order: "little".into(),
            class_names: Some(CLASS_NAMES.iter().map(|s| s.to_string()).collect()),
        },
    )
}

fn read_sidecar(path: &Path, dtype: &str) -> Result<[usize; 3]> {
    let side: Sidecar = io::read_json(&sidecar_path(path))?;
    if side.dtype != dtype || side.byte_order != "little" {
        return Err(Error::Format {
            path: path.into(),
            message: format!("expected little-endian {dtype}, sidecar says {} {}", side.byte_order, side.dtype),
        });
    }
    Ok(side.shape)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let shape = read_sidecar(path, "float32")?;
    Volume::new(Grid3::new(shape, io::read_f32(path)?)?)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let shape = read_sidecar(path, "uint8")?;
    LabelMap::new(Grid3::new(shape, io::read_u8(path)?)?)
}

impl DatasetManifest {
    pub fn new(seed: u64, ratios: SplitRatios, spec: Option<PhantomSpec>, root: PathBuf) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            seed,
            ratios,
            spec,
            entries: Vec::new(),
            root,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let mut m: Self = io::read_json(&file)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Format {
                path: file,
                message: format!("unknown manifest format {}", m.format),
            });
        }
        let mut ids: Vec<&str> = m.entries.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Format {
                path: file,
                message: "duplicate entry ids".into(),
            });
        }
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self) -> Result<PathBuf> {
        io::create_dir(&self.root)?;
        let path = self.root.join(MANIFEST_FILE);
        io::write_json(&path, self)?;
        Ok(path)
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_volume(&self, e: &ManifestEntry) -> Result<Volume> {
        read_volume(&self.root.join(&e.volume))
    }

    pub fn load_labels(&self, e: &ManifestEntry) -> Result<LabelMap> {
        read_labels(&self.root.join(&e.label))
    }

    pub fn load_pair(&self, e: &ManifestEntry) -> Result<(Volume, LabelMap)> {
        Ok((self.load_volume(e)?, self.load_labels(e)?))
    }

    /// Writes a pair under `volumes/` and `labels/` and appends its entry.
    pub fn push_pair(
        &mut self,
        id: String,
        volume: &Volume,
        labels: &LabelMap,
        split: Split,
        provenance: Provenance,
        seed: u64,
    ) -> Result<()> {
        if self.entries.iter().any(|e| e.id == id) {
            return Err(Error::Input(format!("duplicate dataset id {id}")));
        }
        let vol_rel = format!("volumes/{id}.f32");
        let lab_rel = format!("labels/{id}.u8");
        write_volume(&self.root.join(&vol_rel), volume)?;
        write_labels(&self.root.join(&lab_rel), labels)?;
        self.entries.push(ManifestEntry {
            id,
            volume: vol_rel,
            label: lab_rel,
            split,
            provenance,
            seed,
        });
        Ok(())
    }
}

/// Deterministic split assignment for `n` items.
pub fn assign_splits(n: usize, seed: u64, ratios: &SplitRatios) -> Vec<Split> {
    let (_, val, test) = ratios.counts(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive(seed, "split"));
    let mut splits = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < val {
            splits[i] = Split::Val;
        } else if rank < val + test {
            splits[i] = Split::Test;
        }
    }
    splits
}

/// Generates `n` phantoms (item seeds `seed + index`), writes them under
/// `out_dir` and returns the saved manifest.
pub fn build_dataset(n: usize, seed: u64, spec: &PhantomSpec, ratios: &SplitRatios, out_dir: &Path) -> Result<DatasetManifest> {
    if n < 3 {
        return Err(Error::Config(format!("dataset needs at least 3 items, got {n}")));
    }
    ratios.validate()?;
    spec.validate()?;
    let splits = assign_splits(n, seed, ratios);
    let mut manifest = DatasetManifest::new(seed, ratios.clone(), Some(spec.clone()), out_dir.to_path_buf());
    for (i, split) in splits.into_iter().enumerate() {
        let item_seed = seed.wrapping_add(i as u64);
        let (v, l) = generate_phantom(item_seed, spec)?;
        manifest.push_pair(format!("phantom_{i:05}"), &v, &l, split, Provenance::Phantom, item_seed)?;
    }
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_follow_floor_rule() {
        let r = SplitRatios::default();
        assert_eq!(r.counts(10), (7, 1, 2));
        assert_eq!(r.counts(720), (504, 72, 144));
        assert_eq!(r.counts(16), (12, 1, 3));
        assert_eq!(r.counts(3), (1, 1, 1));
    }

    #[test]
    fn splits_are_deterministic_and_sized() {
        let r = SplitRatios::default();
        let a = assign_splits(720, 5, &r);
        assert_eq!(a, assign_splits(720, 5, &r));
        assert_ne!(a, assign_splits(720, 6, &r));
        assert_eq!(a.iter().filter(|s| **s == Split::Train).count(), 504);
        assert_eq!(a.iter().filter(|s| **s == Split::Val).count(), 72);
    }

    #[test]
    fn build_and_reload_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::desk();
        let m = build_dataset(10, 3, &spec, &SplitRatios::default(), dir.path()).unwrap();
        assert_eq!(m.split(Split::Train).len(), 7);
        assert_eq!(m.split(Split::Val).len(), 1);
        assert_eq!(m.split(Split::Test).len(), 2);
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        let e = &m.entries[4];
        let (v, l) = m.load_pair(e).unwrap();
        assert_eq!((v, l), generate_phantom(3 + 4, &spec).unwrap());

        let dir2 = tempfile::tempdir().unwrap();
        let again = build_dataset(10, 3, &spec, &SplitRatios::default(), dir2.path()).unwrap();
        assert_eq!(again.entries, m.entries);
        let text = |d: &Path| std::fs::read(d.join(MANIFEST_FILE)).unwrap();
        assert_eq!(text(dir.path()), text(dir2.path()));
    }

    #[test]
    fn tiny_datasets_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_dataset(2, 0, &PhantomSpec::desk(), &SplitRatios::default(), dir.path()).is_err());
    }

    #[test]
    fn unwritable_output_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let r = build_dataset(3, 0, &PhantomSpec::desk(), &SplitRatios::default(), &blocker.join("sub"));
        assert!(matches!(r, Err(Error::Io { .. })));
    }
}
