//! Phantom volumes and label maps, preprocessing, and dataset persistence.

pub mod dataset;
pub mod grid;
pub mod phantom;

pub use dataset::{build_dataset, DatasetManifest, ManifestEntry, Provenance, Split, SplitRatios};
pub use grid::{Grid3, LabelMap, Volume, CLASS_NAMES, N_CLASSES};
pub use phantom::{check_containment, generate_phantom, normalize_volume, PhantomSpec};
