use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lldm_core::eval::ExtractorConfig;
use lldm_core::eval::ExtractorKind;
use lldm_core::pipeline::PipelineConfig;
use lldm_core::segment::SegTrainConfig;
use serde::{Deserialize, Serialize};

/// Everything a run needs. Loaded from `--config` (missing sections fall
/// back to the desk preset) and then overridden by command-line flags.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; replaces `pipeline.seed` when set.
    pub seed: Option<u64>,
    /// Output root; replaces `pipeline.out_dir` when set.
    pub out: Option<PathBuf>,
    pub verbosity: u8,
    pub pipeline: PipelineConfig,
    pub segment: SegTrainConfig,
    /// Extractor for whole-volume FID.
    pub extractor_3d: ExtractorConfig,
    /// Extractor for per-view (slice) FID.
    pub extractor_2d: ExtractorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out: None,
            verbosity: 0,
            pipeline: PipelineConfig::desk(),
            segment: SegTrainConfig::desk(),
            extractor_3d: ExtractorConfig::desk(ExtractorKind::Volume3d),
            extractor_2d: ExtractorConfig::desk(ExtractorKind::Slice2d),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies flag overrides (flags win) and resolves the seed and output
    /// root so that every section agrees.
    pub fn resolve(&mut self, seed: Option<u64>, out: Option<PathBuf>, verbosity: u8) {
        let seed = seed.or(self.seed).unwrap_or(self.pipeline.seed);
        let out = out.or(self.out.take()).unwrap_or_else(|| self.pipeline.out_dir.clone());
        self.seed = Some(seed);
        self.pipeline.seed = seed;
        self.pipeline.out_dir = out.clone();
        self.out = Some(out);
        self.verbosity = self.verbosity.max(verbosity);
    }

    pub fn seed(&self) -> u64 {
        self.pipeline.seed
    }

    pub fn root(&self) -> &Path {
        &self.pipeline.out_dir
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root().join("data")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root().join("checkpoints")
    }

    pub fn synth_dir(&self) -> PathBuf {
        self.root().join("synth")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root().join("reports")
    }
}
