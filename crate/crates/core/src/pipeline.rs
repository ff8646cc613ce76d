//! Staged training and two-stage synthesis.
//!
//! Checkpoint bundle layout (one directory per stage):
//!
//! ```text
//! <ckpt>/config.json                     pipeline config echo
//! <ckpt>/vae-vol/model.{bin,json}        volume autoencoder
//! <ckpt>/vae-label/model.{bin,json}      label autoencoder
//! <ckpt>/ldm-label/model.{bin,json}      label denoiser (meta: latent_scale)
//! <ckpt>/controlnet/base.{bin,json}      frozen volume denoiser (meta: latent_scale)
//! <ckpt>/controlnet/model.{bin,json}     ControlNet branch
//! <ckpt>/<stage>/log*.csv                per-step losses
//! <ckpt>/<stage>/summary.json            completion marker
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{continuous_to_label, AeKind, Autoencoder, AutoencoderConfig, LatentGrid};
use crate::controlnet::{
    condition_from_label_latent, encode_condition_from_real, train_controlnet, Condition, ConditionInput, ControlNet,
    ControlNetConfig,
};
use crate::data::{DatasetManifest, LabelMap, PhantomSpec, Provenance, Split, SplitRatios, Volume};
use crate::diffusion::{
    probe_loss, probe_set, q_sample_batch, sample, train_ldm, Denoiser, DenoiserConfig, LdmTrainParams,
    NoiseSchedule, Sampler, ScheduleConfig,
};
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{checkpoint, Array};
use crate::rng::derive_seed;
use crate::train::TrainLog;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "vae-vol")]
    VaeVol,
    #[serde(rename = "vae-label")]
    VaeLabel,
    #[serde(rename = "ldm-label")]
    LdmLabel,
    #[serde(rename = "controlnet")]
    ControlNet,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::VaeVol, Stage::VaeLabel, Stage::LdmLabel, Stage::ControlNet];

    pub fn name(self) -> &'static str {
        match self {
            Stage::VaeVol => "vae-vol",
            Stage::VaeLabel => "vae-label",
            Stage::LdmLabel => "ldm-label",
            Stage::ControlNet => "controlnet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }

    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::VaeVol | Stage::VaeLabel => &[],
            Stage::LdmLabel => &[Stage::VaeLabel],
            Stage::ControlNet => &[Stage::VaeVol, Stage::VaeLabel, Stage::LdmLabel],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_phantoms: usize,
    pub spec: PhantomSpec,
    pub ratios: SplitRatios,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdmStageConfig {
    pub denoiser: DenoiserConfig,
    pub train: LdmTrainParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlStageConfig {
    pub branch: ControlNetConfig,
    pub train: LdmTrainParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub sampler: Sampler,
    pub condition_input: ConditionInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub vae_volume: AutoencoderConfig,
    pub vae_label: AutoencoderConfig,
    pub schedule: ScheduleConfig,
    pub ldm_label: LdmStageConfig,
    /// Unconditional volume denoiser that the ControlNet stage freezes.
    pub ldm_volume: LdmStageConfig,
    pub controlnet: ControlStageConfig,
    pub sampling: SamplingConfig,
    /// Timesteps per latent in the fixed loss probe.
    pub probe_timesteps: usize,
}

impl PipelineConfig {
    /// 16 phantoms at 32×32×16, 50-step chain.
    pub fn desk() -> Self {
        let seed = 7;
        let ldm_train = |steps, seed| LdmTrainParams {
            lr: 1e-3,
            batch_size: 8,
            steps,
            seed,
        };
        Self {
            seed,
            out_dir: PathBuf::from("runs/desk"),
            data: DataConfig {
                n_phantoms: 16,
                spec: PhantomSpec::desk(),
                ratios: SplitRatios::default(),
            },
            vae_volume: AutoencoderConfig::desk_volume(),
            vae_label: AutoencoderConfig::desk_label(),
            schedule: ScheduleConfig::short(50),
            ldm_label: LdmStageConfig {
                denoiser: DenoiserConfig::desk(4, 21),
                train: ldm_train(1500, 22),
            },
            ldm_volume: LdmStageConfig {
                denoiser: DenoiserConfig::desk(4, 31),
                train: ldm_train(1500, 32),
            },
            controlnet: ControlStageConfig {
                branch: ControlNetConfig {
                    hint_channels: 4,
                    seed: 41,
                },
                train: ldm_train(1000, 42),
            },
            sampling: SamplingConfig {
                sampler: Sampler::Ancestral,
                condition_input: ConditionInput::Continuous,
            },
            probe_timesteps: 8,
        }
    }

    /// Desk grid with a handful of phantoms and a few steps per stage;
    /// for smoke tests, not for sample quality.
    pub fn tiny() -> Self {
        let mut cfg = Self::desk();
        cfg.out_dir = PathBuf::from("runs/tiny");
        cfg.data.n_phantoms = 6;
        for ae in [&mut cfg.vae_volume, &mut cfg.vae_label] {
            ae.base_width = 4;
            ae.train.steps = 3;
            ae.train.batch_size = 2;
        }
        for ldm in [&mut cfg.ldm_label, &mut cfg.ldm_volume] {
            ldm.denoiser.base_width = 8;
            ldm.denoiser.time_dim = 8;
            ldm.train.steps = 3;
            ldm.train.batch_size = 4;
        }
        cfg.controlnet.train.steps = 3;
        cfg.controlnet.train.batch_size = 4;
        cfg.probe_timesteps = 2;
        cfg
    }

    pub fn grid(&self) -> [usize; 3] {
        self.data.spec.grid_shape
    }

    pub fn validate(&self) -> Result<()> {
        self.data.spec.validate()?;
        self.vae_volume.validate()?;
        self.vae_label.validate()?;
        if self.vae_volume.kind != AeKind::Volume || self.vae_label.kind != AeKind::Label {
            return Err(Error::Config("vae_volume / vae_label kinds are swapped".into()));
        }
        let grid = self.grid();
        let vs = self.vae_volume.latent_shape(grid)?;
        let ls = self.vae_label.latent_shape(grid)?;
        if vs[1..] != ls[1..] {
            return Err(Error::Config(format!(
                "volume latent grid {:?} and label latent grid {:?} differ",
                &vs[1..],
                &ls[1..]
            )));
        }
        let check_ldm = |name: &str, s: &LdmStageConfig, channels: usize, shape: [usize; 4]| -> Result<()> {
            s.denoiser.validate()?;
            s.train.validate()?;
            if s.denoiser.latent_channels != channels {
                return Err(Error::Config(format!(
                    "{name}: denoiser has {} latent channels, autoencoder has {channels}",
                    s.denoiser.latent_channels
                )));
            }
            let mut full = vec![1];
            full.extend_from_slice(&shape);
            s.denoiser.check_latent(&full).map_err(|e| Error::Config(format!("{name}: {e}")))
        };
        check_ldm("ldm_label", &self.ldm_label, self.vae_label.latent_channels, ls)?;
        check_ldm("ldm_volume", &self.ldm_volume, self.vae_volume.latent_channels, vs)?;
        if self.controlnet.branch.hint_channels != self.vae_label.latent_channels {
            return Err(Error::Config("controlnet.branch.hint_channels must equal the label latent channels".into()));
        }
        self.controlnet.train.validate()?;
        self.schedule.build()?;
        if self.probe_timesteps == 0 {
            return Err(Error::Config("probe_timesteps must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Completion record written last in each stage directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub steps: usize,
    pub seconds: f64,
    pub final_loss: f64,
    /// Fixed-probe loss at initialization and after training (diffusion stages).
    #[serde(default)]
    pub probe_initial: Option<f64>,
    #[serde(default)]
    pub probe_final: Option<f64>,
    /// Posterior-mean reconstruction loss on the training items (autoencoder stages).
    #[serde(default)]
    pub reconstruction: Option<f64>,
    pub checksum: String,
}

impl StageSummary {
    /// Relative probe-loss reduction `1 − final / initial`.
    pub fn probe_drop(&self) -> Option<f64> {
        Some(1.0 - self.probe_final? / self.probe_initial?)
    }
}

pub fn stage_dir(ckpt: &Path, stage: Stage) -> PathBuf {
    ckpt.join(stage.name())
}

fn summary_path(ckpt: &Path, stage: Stage) -> PathBuf {
    stage_dir(ckpt, stage).join("summary.json")
}

pub fn stage_complete(ckpt: &Path, stage: Stage) -> bool {
    let dir = stage_dir(ckpt, stage);
    summary_path(ckpt, stage).is_file()
        && checkpoint::exists(&dir, "model")
        && (stage != Stage::ControlNet || checkpoint::exists(&dir, "base"))
}

pub fn read_summary(ckpt: &Path, stage: Stage) -> Result<StageSummary> {
    io::read_json(&summary_path(ckpt, stage))
}

/// Which stages a training call covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageRequest {
    /// Every stage, reusing completed ones up to the first missing stage.
    All,
    /// One stage; its prerequisites must already be complete.
    Only(Stage),
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainingReport {
    pub trained: Vec<StageSummary>,
    pub reused: Vec<Stage>,
}

fn latent_scale(latents: &[Array<f32>]) -> Result<f32> {
    let n: usize = latents.iter().map(|l| l.len()).sum();
    let mean = latents.iter().flat_map(|l| l.data()).map(|&x| x as f64).sum::<f64>() / n as f64;
    let var = latents
        .iter()
        .flat_map(|l| l.data())
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    if !(var > 1e-12) || !var.is_finite() {
        return Err(Error::Input("latent set has zero or non-finite variance".into()));
    }
    Ok((1.0 / var.sqrt()) as f32)
}

fn scale_all(latents: Vec<Array<f32>>, s: f32) -> Vec<Array<f32>> {
    latents.into_iter().map(|l| l.map(|x| x * s)).collect()
}

fn scale_meta(s: f32) -> serde_json::Value {
    serde_json::json!({ "latent_scale": s })
}

fn read_scale(dir: &Path, stem: &str) -> Result<f32> {
    let loaded = checkpoint::load(dir, stem)?;
    loaded
        .index
        .meta
        .get("latent_scale")
        .and_then(|v| v.as_f64())
        .map(|v| v as f32)
        .ok_or_else(|| Error::Format {
            path: dir.join(stem),
            message: "checkpoint lacks latent_scale".into(),
        })
}

fn load_ae(ckpt: &Path, stage: Stage) -> Result<Autoencoder> {
    let dir = stage_dir(ckpt, stage);
    if !checkpoint::exists(&dir, "model") {
        return Err(Error::MissingCheckpoint {
            stage: stage.name().into(),
            path: dir,
        });
    }
    Autoencoder::load(&dir, "model")
}

struct TrainData {
    volumes: Vec<Volume>,
    labels: Vec<LabelMap>,
}

impl TrainData {
    fn load(manifest: &DatasetManifest, grid: [usize; 3]) -> Result<Self> {
        let entries = manifest.split(Split::Train);
        if entries.is_empty() {
            return Err(Error::Input("manifest has no training items".into()));
        }
        let mut volumes = Vec::new();
        let mut labels = Vec::new();
        for e in entries {
            let (v, l) = manifest.load_pair(e)?;
            if v.shape() != grid || l.shape() != grid {
                return Err(Error::Shape(format!(
                    "item {} has grid {:?}, config expects {grid:?}",
                    e.id,
                    v.shape()
                )));
            }
            volumes.push(v);
            labels.push(l);
        }
        Ok(Self { volumes, labels })
    }
}

fn encode_means(ae: &Autoencoder, data: &TrainData) -> Result<Vec<Array<f32>>> {
    match ae.config.kind {
        AeKind::Volume => data.volumes.iter().map(|v| Ok(ae.encode_volume(v)?.0.data)).collect(),
        AeKind::Label => data.labels.iter().map(|l| Ok(ae.encode_labels(l)?.0.data)).collect(),
    }
}

fn write_summary(ckpt: &Path, s: &StageSummary) -> Result<()> {
    io::write_json(&summary_path(ckpt, s.stage), s)
}

fn last_loss(log: &TrainLog) -> f64 {
    log.rows.last().map_or(f64::NAN, |r| r[1])
}

fn train_ae_stage(cfg: &PipelineConfig, data: &TrainData, ckpt: &Path, stage: Stage) -> Result<StageSummary> {
    let start = Instant::now();
    let ae_cfg = if stage == Stage::VaeVol { &cfg.vae_volume } else { &cfg.vae_label };
    let mut ae = Autoencoder::new(ae_cfg.clone())?;
    let inputs = match stage {
        Stage::VaeVol => crate::autoencoder::AeInputs::Volumes(&data.volumes),
        _ => crate::autoencoder::AeInputs::Labels(&data.labels),
    };
    let log = ae.fit(&inputs, stage.name())?;
    let recon = ae.reconstruction_loss(&inputs)?;
    let dir = stage_dir(ckpt, stage);
    ae.save(&dir, "model", serde_json::json!({ "reconstruction": recon }))?;
    log.write_csv(&dir.join("log.csv"))?;
    Ok(StageSummary {
        stage,
        steps: ae_cfg.train.steps,
        seconds: start.elapsed().as_secs_f64(),
        final_loss: last_loss(&log),
        probe_initial: None,
        probe_final: None,
        reconstruction: Some(recon),
        checksum: ae.params.checksum(),
    })
}

fn train_label_ldm_stage(cfg: &PipelineConfig, data: &TrainData, ckpt: &Path) -> Result<StageSummary> {
    let start = Instant::now();
    let schedule = cfg.schedule.build()?;
    let label_ae = load_ae(ckpt, Stage::VaeLabel)?;
    let raw = encode_means(&label_ae, data)?;
    let scale = latent_scale(&raw)?;
    let latents = scale_all(raw, scale);
    let probe = probe_set(&latents, &schedule, cfg.probe_timesteps, derive_seed(cfg.seed, "probe-label"));
    let stage = Stage::LdmLabel;
    let initial = probe_loss(&Denoiser::new(cfg.ldm_label.denoiser.clone())?, &probe, &schedule)?;
    let (den, log) = train_ldm(&latents, &cfg.ldm_label.denoiser, &schedule, &cfg.ldm_label.train, stage.name())?;
    let fin = probe_loss(&den, &probe, &schedule)?;
    let dir = stage_dir(ckpt, stage);
    den.save(&dir, "model", scale_meta(scale))?;
    log.write_csv(&dir.join("log.csv"))?;
    Ok(StageSummary {
        stage,
        steps: cfg.ldm_label.train.steps,
        seconds: start.elapsed().as_secs_f64(),
        final_loss: last_loss(&log),
        probe_initial: Some(initial),
        probe_final: Some(fin),
        reconstruction: None,
        checksum: den.params.checksum(),
    })
}

/// Mean squared noise-prediction error of a ControlNet on a fixed probe.
fn controlnet_probe(
    net: &ControlNet,
    latents: &[Array<f32>],
    conds: &[Condition],
    schedule: &NoiseSchedule,
    per_item: usize,
    seed: u64,
) -> Result<f64> {
    let (z0, t, eps) = probe_set(latents, schedule, per_item, seed);
    let c: Vec<&Array<f32>> = (0..t.len()).map(|i| &conds[i / per_item].c).collect();
    let zt = q_sample_batch(&z0, &t, &eps, schedule)?;
    let out = net.predict_batch_conditional(&zt, &t, &Array::stack(&c))?;
    Ok(crate::diffusion::mse(&out, &eps))
}

fn train_controlnet_stage(cfg: &PipelineConfig, data: &TrainData, ckpt: &Path) -> Result<StageSummary> {
    let start = Instant::now();
    let schedule = cfg.schedule.build()?;
    let vol_ae = load_ae(ckpt, Stage::VaeVol)?;
    let label_ae = load_ae(ckpt, Stage::VaeLabel)?;
    let label_dir = stage_dir(ckpt, Stage::LdmLabel);
    let label_scale = read_scale(&label_dir, "model")?;
    let raw = encode_means(&vol_ae, data)?;
    let vol_scale = latent_scale(&raw)?;
    let latents = scale_all(raw, vol_scale);
    let conds = data
        .labels
        .iter()
        .map(|l| encode_condition_from_real(l, &label_ae, label_scale))
        .collect::<Result<Vec<_>>>()?;
    let dir = stage_dir(ckpt, Stage::ControlNet);

    let (base, base_log) = train_ldm(
        &latents,
        &cfg.ldm_volume.denoiser,
        &schedule,
        &cfg.ldm_volume.train,
        "controlnet/base",
    )?;
    base.save(&dir, "base", scale_meta(vol_scale))?;
    base_log.write_csv(&dir.join("log_base.csv"))?;

    let probe_seed = derive_seed(cfg.seed, "probe-controlnet");
    let init_net = ControlNet::new(base.clone(), cfg.controlnet.branch.clone())?;
    let initial = controlnet_probe(&init_net, &latents, &conds, &schedule, cfg.probe_timesteps, probe_seed)?;
    drop(init_net);
    let stage = Stage::ControlNet;
    let (net, log) = train_controlnet(
        &latents,
        &conds,
        base,
        &cfg.controlnet.branch,
        &schedule,
        &cfg.controlnet.train,
        stage.name(),
    )?;
    let fin = controlnet_probe(&net, &latents, &conds, &schedule, cfg.probe_timesteps, probe_seed)?;
    net.save(&dir, "model")?;
    log.write_csv(&dir.join("log.csv"))?;
    Ok(StageSummary {
        stage,
        steps: cfg.controlnet.train.steps,
        seconds: start.elapsed().as_secs_f64(),
        final_loss: last_loss(&log),
        probe_initial: Some(initial),
        probe_final: Some(fin),
        reconstruction: None,
        checksum: net.params.checksum(),
    })
}

fn run_stage(cfg: &PipelineConfig, data: &TrainData, ckpt: &Path, stage: Stage) -> Result<StageSummary> {
    let marker = summary_path(ckpt, stage);
    if marker.exists() {
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    log::info!("training stage {stage}");
    let summary = match stage {
        Stage::VaeVol | Stage::VaeLabel => train_ae_stage(cfg, data, ckpt, stage),
        Stage::LdmLabel => train_label_ldm_stage(cfg, data, ckpt),
        Stage::ControlNet => train_controlnet_stage(cfg, data, ckpt),
    }
    .map_err(|e| Error::Stage {
        stage: stage.name().into(),
        last_good: Stage::ALL
            .iter()
            .rev()
            .find(|s| **s < stage && stage_complete(ckpt, **s))
            .map(|s| stage_dir(ckpt, *s).display().to_string()),
        source: Box::new(e),
    })?;
    write_summary(ckpt, &summary)?;
    log::info!("stage {stage} done in {:.1}s", summary.seconds);
    Ok(summary)
}

/// Trains the requested stages into `ckpt`.
///
/// With [`StageRequest::All`], completed stages are reused until the first
/// incomplete one; that stage and every later stage are retrained.
/// Retraining a single stage invalidates the completion markers downstream.
pub fn run_training(
    cfg: &PipelineConfig,
    manifest: &DatasetManifest,
    ckpt: &Path,
    request: StageRequest,
) -> Result<TrainingReport> {
    cfg.validate()?;
    io::create_dir(ckpt)?;
    let plan: Vec<Stage> = match request {
        StageRequest::All => {
            let first = Stage::ALL.iter().position(|&s| !stage_complete(ckpt, s));
            match first {
                Some(i) => Stage::ALL[i..].to_vec(),
                None => Vec::new(),
            }
        }
        StageRequest::Only(stage) => {
            for &pre in stage.prerequisites() {
                if !stage_complete(ckpt, pre) {
                    return Err(Error::MissingCheckpoint {
                        stage: pre.name().into(),
                        path: stage_dir(ckpt, pre),
                    });
                }
            }
            vec![stage]
        }
    };
    let mut report = TrainingReport {
        reused: Stage::ALL.iter().copied().filter(|s| !plan.contains(s) && request == StageRequest::All).collect(),
        ..Default::default()
    };
    if plan.is_empty() {
        return Ok(report);
    }
    io::write_json(&ckpt.join("config.json"), cfg)?;
    let data = TrainData::load(manifest, cfg.grid())?;
    for &stage in &plan {
        report.trained.push(run_stage(cfg, &data, ckpt, stage)?);
        if request != StageRequest::All {
            for later in Stage::ALL.iter().filter(|s| s.prerequisites().contains(&stage)) {
                let marker = summary_path(ckpt, *later);
                if marker.exists() {
                    std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
                }
            }
        }
    }
    Ok(report)
}

/// Label autoencoder plus label denoiser: enough to sample labels.
pub struct LabelModels {
    pub autoencoder: Autoencoder,
    pub denoiser: Denoiser,
    pub scale: f32,
}

impl LabelModels {
    pub fn load(ckpt: &Path) -> Result<Self> {
        let dir = stage_dir(ckpt, Stage::LdmLabel);
        if !stage_complete(ckpt, Stage::LdmLabel) {
            return Err(Error::MissingCheckpoint {
                stage: Stage::LdmLabel.name().into(),
                path: dir,
            });
        }
        Ok(Self {
            autoencoder: load_ae(ckpt, Stage::VaeLabel)?,
            denoiser: Denoiser::load(&dir, "model")?,
            scale: read_scale(&dir, "model")?,
        })
    }
}

/// Every trained model needed for paired synthesis.
pub struct Checkpoints {
    pub config: PipelineConfig,
    pub schedule: NoiseSchedule,
    pub label: LabelModels,
    pub volume_ae: Autoencoder,
    pub volume_scale: f32,
    pub controlnet: ControlNet,
    pub root: PathBuf,
}

impl Checkpoints {
    pub fn load(ckpt: &Path) -> Result<Self> {
        let config = PipelineConfig::load(&ckpt.join("config.json"))?;
        for stage in Stage::ALL {
            if !stage_complete(ckpt, stage) {
                return Err(Error::MissingCheckpoint {
                    stage: stage.name().into(),
                    path: stage_dir(ckpt, stage),
                });
            }
        }
        let dir = stage_dir(ckpt, Stage::ControlNet);
        let base = Denoiser::load(&dir, "base")?;
        Ok(Self {
            schedule: config.schedule.build()?,
            label: LabelModels::load(ckpt)?,
            volume_ae: load_ae(ckpt, Stage::VaeVol)?,
            volume_scale: read_scale(&dir, "base")?,
            controlnet: ControlNet::load(&dir, "model", base)?,
            config,
            root: ckpt.to_path_buf(),
        })
    }

    /// Checksums identifying the models behind a synthetic item.
    pub fn identifiers(&self) -> Vec<String> {
        vec![
            format!("vae-vol:{}", &self.volume_ae.params.checksum()[..16]),
            format!("vae-label:{}", &self.label.autoencoder.params.checksum()[..16]),
            format!("ldm-label:{}", &self.label.denoiser.params.checksum()[..16]),
            format!("controlnet:{}", &self.controlnet.params.checksum()[..16]),
        ]
    }
}

/// Samples a scaled label latent and its discretized decoding.
pub fn synthesize_label_latent(
    models: &LabelModels,
    schedule: &NoiseSchedule,
    grid: [usize; 3],
    seed: u64,
    sampler: Sampler,
) -> Result<(LabelMap, LatentGrid)> {
    let shape = models.autoencoder.config.latent_shape(grid)?;
    let z = sample(&models.denoiser, schedule, &shape, derive_seed(seed, "label"), sampler)?;
    let latent = LatentGrid {
        data: z,
        source_shape: grid,
    };
    let unscaled = LatentGrid {
        data: latent.data.map(|x| x / models.scale),
        source_shape: grid,
    };
    let label = continuous_to_label(&models.autoencoder.decode_label_probs(&unscaled)?)?;
    Ok((label, latent))
}

pub fn synthesize_label(models: &LabelModels, cfg: &PipelineConfig, seed: u64) -> Result<LabelMap> {
    let schedule = cfg.schedule.build()?;
    Ok(synthesize_label_latent(models, &schedule, cfg.grid(), seed, cfg.sampling.sampler)?.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub label: LabelMap,
    pub volume: Volume,
    pub seed: u64,
    pub checkpoints: Vec<String>,
}

/// Label from the label chain, then a volume from the conditional chain.
pub fn synthesize_pair(ck: &Checkpoints, seed: u64) -> Result<SyntheticPair> {
    let cfg = &ck.config;
    let grid = cfg.grid();
    let (label, latent) = synthesize_label_latent(&ck.label, &ck.schedule, grid, seed, cfg.sampling.sampler)?;
    let cond = condition_from_label_latent(
        &latent,
        ck.label.scale,
        &ck.label.autoencoder,
        &ck.label.autoencoder,
        ck.label.scale,
        cfg.sampling.condition_input,
    )?;
    let shape = ck.volume_ae.config.latent_shape(grid)?;
    let z = sample(
        &ck.controlnet.with_condition(&cond),
        &ck.schedule,
        &shape,
        derive_seed(seed, "volume"),
        cfg.sampling.sampler,
    )?;
    let volume = ck.volume_ae.decode_volume(&LatentGrid {
        data: z.map(|x| x / ck.volume_scale),
        source_shape: grid,
    })?;
    Ok(SyntheticPair {
        label,
        volume,
        seed,
        checkpoints: ck.identifiers(),
    })
}

/// Volume synthesized for a given real label (debug path).
pub fn synthesize_volume_for_label(ck: &Checkpoints, label: &LabelMap, seed: u64) -> Result<Volume> {
    let cond = encode_condition_from_real(label, &ck.label.autoencoder, ck.label.scale)?;
    let grid = label.shape();
    let shape = ck.volume_ae.config.latent_shape(grid)?;
    let z = sample(
        &ck.controlnet.with_condition(&cond),
        &ck.schedule,
        &shape,
        derive_seed(seed, "volume"),
        ck.config.sampling.sampler,
    )?;
    ck.volume_ae.decode_volume(&LatentGrid {
        data: z.map(|x| x / ck.volume_scale),
        source_shape: grid,
    })
}

pub fn synthetic_id(index: usize) -> String {
    format!("synth_{index:05}")
}

/// Writes `n` pairs (item seed `seed + index`) as a synthetic training set.
pub fn synthesize_dataset(ck: &Checkpoints, n: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Input("synthesize at least one pair".into()));
    }
    let mut manifest = DatasetManifest::new(seed, SplitRatios::default(), None, out_dir.to_path_buf());
    for i in 0..n {
        let item_seed = seed.wrapping_add(i as u64);
        let pair = synthesize_pair(ck, item_seed)?;
        manifest.push_pair(
            synthetic_id(i),
            &pair.volume,
            &pair.label,
            Split::Train,
            Provenance::Synthetic,
            item_seed,
        )?;
    }
    manifest.save()?;
    Ok(manifest)
}
