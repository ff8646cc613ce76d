//! Downstream segmentation harness: task label mappings, a small 3D U-Net
//! trained with soft Dice + cross-entropy, and the real vs. real+synthetic
//! augmentation comparison.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autoencoder::volume_batch;
use crate::data::{DatasetManifest, Grid3, LabelMap, ManifestEntry, Provenance, Split, Volume};
use crate::error::{Error, Result};
use crate::eval::DiceReport;
use crate::nn::{collect_grads, AdamW, Bound, Conv, ConvGeom, ParamSet, Tape, Var};
use crate::rng::derive;
use crate::train::{ensure_finite, BatchOrder, TrainLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegTask {
    LiverOnly,
    VeinOnly,
    HccOnly,
    MultiClass,
}

impl SegTask {
    pub const ALL: [SegTask; 4] = [SegTask::LiverOnly, SegTask::VeinOnly, SegTask::HccOnly, SegTask::MultiClass];

    pub fn name(self) -> &'static str {
        match self {
            SegTask::LiverOnly => "liver_only",
            SegTask::VeinOnly => "vein_only",
            SegTask::HccOnly => "hcc_only",
            SegTask::MultiClass => "multi_class",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            SegTask::LiverOnly => "Liver-Only",
            SegTask::VeinOnly => "Vein-Only",
            SegTask::HccOnly => "HCC-Only",
            SegTask::MultiClass => "Multi-Class",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Target class of a source class.
    pub fn map(self, class: u8) -> u8 {
        match (self, class) {
            (SegTask::LiverOnly, 1..=4) => 1,
            (SegTask::VeinOnly, 2 | 3) => 1,
            (SegTask::HccOnly, 4) => 1,
            (SegTask::MultiClass, 2..=4) => class - 1,
            _ => 0,
        }
    }

    /// Output channels including background.
    pub fn n_classes(self) -> usize {
        match self {
            SegTask::MultiClass => 4,
            _ => 2,
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            SegTask::LiverOnly => &["liver"],
            SegTask::VeinOnly => &["vein"],
            SegTask::HccOnly => &["tumor"],
            SegTask::MultiClass => &["portal_vein", "hepatic_vein", "tumor"],
        }
    }

    pub fn foreground(self) -> Vec<u8> {
        (1..self.n_classes() as u8).collect()
    }
}

pub fn build_task_labels(l: &LabelMap, task: SegTask) -> LabelMap {
    let data = l.data().iter().map(|&c| task.map(c)).collect();
    LabelMap::new(Grid3::new(l.shape(), data).expect("same grid")).expect("task classes are valid")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Plain two-level 3D U-Net.
    Unet,
    /// Same layout with residual blocks.
    Resunet,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Unet => "unet",
            Arch::Resunet => "resunet",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Arch::Unet => "U-Net",
            Arch::Resunet => "ResUNet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unet" => Some(Arch::Unet),
            "resunet" => Some(Arch::Resunet),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegTrainConfig {
    pub arch: Arch,
    pub base_width: usize,
    pub lr: f64,
    /// First-moment decay of Adam.
    pub momentum: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Validation cadence in steps.
    pub eval_every: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub dice_weight: f64,
    pub ce_weight: f64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Unet,
            base_width: 8,
            lr: 1e-4,
            momentum: 0.95,
            batch_size: 4,
            max_steps: 2000,
            eval_every: 25,
            patience: 8,
            seed: 0,
            dice_weight: 1.0,
            ce_weight: 1.0,
        }
    }
}

impl SegTrainConfig {
    /// Short schedule with a larger step size for the phantom experiment.
    pub fn desk() -> Self {
        Self {
            lr: 5e-3,
            batch_size: 2,
            max_steps: 300,
            eval_every: 25,
            patience: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("lr > 0 and momentum in [0, 1) required".into()));
        }
        if self.batch_size == 0 || self.base_width == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size, base_width and eval_every must be positive".into()));
        }
        if !(self.dice_weight > 0.0 && self.ce_weight > 0.0) {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        Ok(())
    }
}

struct Block {
    c1: Conv,
    c2: Conv,
    skip: Option<Conv>,
}

impl Block {
    fn new(ps: &mut ParamSet<f32>, rng: &mut crate::rng::Rng64, name: &str, cin: usize, cout: usize, residual: bool) -> Self {
        let k3 = ConvGeom::cube(3, 1);
        Self {
            c1: Conv::new(ps, rng, &format!("{name}.conv1"), cin, cout, k3),
            c2: Conv::new(ps, rng, &format!("{name}.conv2"), cout, cout, k3),
            skip: residual.then(|| Conv::new(ps, rng, &format!("{name}.skip"), cin, cout, ConvGeom::pointwise())),
        }
    }

    fn forward<'t>(&self, p: &Bound<'t, f32>, x: Var<'t, f32>) -> Var<'t, f32> {
        let h = self.c1.forward(p, x).relu();
        let h = self.c2.forward(p, h);
        match &self.skip {
            Some(s) => h.add(s.forward(p, x)).relu(),
            None => h.relu(),
        }
    }
}

fn flat_targets(labels: &[&LabelMap]) -> Arc<Vec<u8>> {
    Arc::new(labels.iter().flat_map(|l| l.data().iter().copied()).collect())
}

/// 3D U-Net segmenter with two downsampling steps.
pub struct Segmenter {
    pub task: SegTask,
    pub config: SegTrainConfig,
    pub params: ParamSet<f32>,
    enc0: Block,
    down0: Conv,
    enc1: Block,
    down1: Conv,
    mid: Block,
    dec1: Block,
    dec0: Block,
    head: Conv,
}

impl Segmenter {
    pub fn new(task: SegTask, config: SegTrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = derive(config.seed, "segmenter-init");
        let mut ps = ParamSet::new();
        let w = config.base_width;
        let res = config.arch == Arch::Resunet;
        let s2 = ConvGeom::cube(3, 2);
        let enc0 = Block::new(&mut ps, &mut rng, "enc0", 1, w, res);
        let down0 = Conv::new(&mut ps, &mut rng, "down0", w, w, s2);
        let enc1 = Block::new(&mut ps, &mut rng, "enc1", w, 2 * w, res);
        let down1 = Conv::new(&mut ps, &mut rng, "down1", 2 * w, 2 * w, s2);
        let mid = Block::new(&mut ps, &mut rng, "mid", 2 * w, 4 * w, res);
        let dec1 = Block::new(&mut ps, &mut rng, "dec1", 6 * w, 2 * w, res);
        let dec0 = Block::new(&mut ps, &mut rng, "dec0", 3 * w, w, res);
        let head = Conv::new(&mut ps, &mut rng, "head", w, task.n_classes(), ConvGeom::pointwise());
        Ok(Self {
            task,
            config,
            params: ps,
            enc0,
            down0,
            enc1,
            down1,
            mid,
            dec1,
            dec0,
            head,
        })
    }

    fn logits<'t>(&self, p: &Bound<'t, f32>, x: Var<'t, f32>) -> Var<'t, f32> {
        let e0 = self.enc0.forward(p, x);
        let e1 = self.enc1.forward(p, self.down0.forward(p, e0).relu());
        let m = self.mid.forward(p, self.down1.forward(p, e1).relu());
        let d1 = self.dec1.forward(p, m.upsample2().concat(e1));
        let d0 = self.dec0.forward(p, d1.upsample2().concat(e0));
        self.head.forward(p, d0)
    }

    fn check_grid(shape: [usize; 3]) -> Result<()> {
        if shape.iter().any(|&d| d % 4 != 0 || d == 0) {
            return Err(Error::Shape(format!("segmenter needs grid dims divisible by 4, got {shape:?}")));
        }
        Ok(())
    }

    fn loss<'t>(&self, logits: Var<'t, f32>, targets: Arc<Vec<u8>>) -> Var<'t, f32> {
        let c = &self.config;
        let d = logits.soft_dice_loss(targets.clone(), false).scale(c.dice_weight as f32);
        let ce = logits.cross_entropy(targets).scale(c.ce_weight as f32);
        d.add(ce)
    }

    pub fn predict(&self, v: &Volume) -> Result<LabelMap> {
        Self::check_grid(v.shape())?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let logits = self.logits(&p, tape.constant(volume_batch(&[v])));
        let [h, w, d] = v.shape();
        let out = (*logits.value()).clone().reshape(&[self.task.n_classes(), h, w, d]);
        crate::autoencoder::continuous_to_label(&out)
    }

    fn batch_loss(&self, vols: &[&Volume], targets: &[&LabelMap]) -> Result<f64> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let logits = self.logits(&p, tape.constant(volume_batch(vols)));
        Ok(self.loss(logits, flat_targets(targets)).value().item() as f64)
    }
}

/// Training pairs for one task: volumes with remapped labels.
pub struct SegData {
    pub volumes: Vec<Volume>,
    pub targets: Vec<LabelMap>,
}

impl SegData {
    pub fn from_entries(manifest: &DatasetManifest, entries: &[&ManifestEntry], task: SegTask) -> Result<Self> {
        let mut volumes = Vec::with_capacity(entries.len());
        let mut targets = Vec::with_capacity(entries.len());
        for e in entries {
            let (v, l) = manifest.load_pair(e)?;
            volumes.push(v);
            targets.push(build_task_labels(&l, task));
        }
        Ok(Self { volumes, targets })
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn extend(&mut self, other: SegData) {
        self.volumes.extend(other.volumes);
        self.targets.extend(other.targets);
    }
}

/// Real train split plus, when given, as many synthetic pairs as there are
/// real training items (fewer if the synthetic set is smaller).
pub fn training_set(real: &DatasetManifest, synthetic: Option<&DatasetManifest>, task: SegTask) -> Result<SegData> {
    let real_train = real.split(Split::Train);
    let mut data = SegData::from_entries(real, &real_train, task)?;
    if let Some(s) = synthetic {
        let entries: Vec<&ManifestEntry> = s
            .entries
            .iter()
            .filter(|e| e.provenance == Provenance::Synthetic)
            .take(real_train.len())
            .collect();
        if entries.is_empty() {
            return Err(Error::Input("synthetic manifest has no synthetic entries".into()));
        }
        data.extend(SegData::from_entries(s, &entries, task)?);
    }
    Ok(data)
}

#[derive(Clone, Debug)]
pub struct SegOutcome {
    pub log: TrainLog,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub warnings: Vec<String>,
}

/// Fits a segmenter with early stopping on the validation loss; the
/// returned weights are those of the best validation point.
///
/// Log columns: `step, loss, val_loss` (`val_loss` is NaN between checks).
pub fn fit_segmenter(train: &SegData, val: &SegData, task: SegTask, cfg: &SegTrainConfig) -> Result<(Segmenter, SegOutcome)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("segmenter needs nonempty train and val sets".into()));
    }
    let grid = train.volumes[0].shape();
    Segmenter::check_grid(grid)?;
    if train.volumes.iter().chain(&val.volumes).any(|v| v.shape() != grid) {
        return Err(Error::Shape("all segmentation items must share a grid".into()));
    }
    let mut warnings = Vec::new();
    for c in task.foreground() {
        if train.targets.iter().all(|t| t.count(c) == 0) {
            let msg = format!("class {c} of task {} is absent from every training target", task.name());
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let mut net = Segmenter::new(task, cfg.clone())?;
    let mut opt = AdamW::adam(cfg.lr, cfg.momentum);
    let mut rng = derive(cfg.seed, "segmenter-train");
    let mut order = BatchOrder::new(train.len());
    let mut log = TrainLog::new(&["step", "loss", "val_loss"]);
    let val_vols: Vec<&Volume> = val.volumes.iter().collect();
    let val_targets: Vec<&LabelMap> = val.targets.iter().collect();
    let mut best = (f64::INFINITY, 0usize, net.params.clone());
    let mut stale = 0;
    let mut stopped_early = false;
    for step in 0..cfg.max_steps {
        let idx = order.next_batch(cfg.batch_size, &mut rng);
        let vols: Vec<&Volume> = idx.iter().map(|&i| &train.volumes[i]).collect();
        let tgts: Vec<&LabelMap> = idx.iter().map(|&i| &train.targets[i]).collect();
        let tape = Tape::new();
        let p = net.params.bind(&tape, true);
        let logits = net.logits(&p, tape.constant(volume_batch(&vols)));
        let loss = net.loss(logits, flat_targets(&tgts));
        let lv = loss.value().item() as f64;
        ensure_finite(lv, "segment", step)?;
        let mut g = tape.backward(loss);
        let grads = collect_grads(&p, &mut g);
        drop(p);
        opt.step(&mut net.params, &grads);
        let mut val_loss = f64::NAN;
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.max_steps {
            val_loss = net.batch_loss(&val_vols, &val_targets)?;
            if val_loss < best.0 {
                best = (val_loss, step + 1, net.params.clone());
                stale = 0;
            } else {
                stale += 1;
            }
        }
        log.push(vec![step as f64, lv, val_loss]);
        if stale >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    let (best_val_loss, best_step, params) = best;
    net.params = params;
    Ok((
        net,
        SegOutcome {
            log,
            best_step,
            best_val_loss,
            stopped_early,
            warnings,
        },
    ))
}

/// Trains on the real train split, plus all pairs of `synthetic` when given;
/// validates on the real val split.
pub fn train_segmenter(
    real: &DatasetManifest,
    synthetic: Option<&DatasetManifest>,
    task: SegTask,
    cfg: &SegTrainConfig,
) -> Result<(Segmenter, SegOutcome)> {
    let train = training_set(real, synthetic, task)?;
    let val = SegData::from_entries(real, &real.split(Split::Val), task)?;
    fit_segmenter(&train, &val, task, cfg)
}

/// Per-class Dice over the test split of `manifest`.
pub fn evaluate_segmenter(net: &Segmenter, manifest: &DatasetManifest) -> Result<DiceReport> {
    let test = manifest.split(Split::Test);
    if test.is_empty() {
        return Err(Error::Input("manifest has no test items".into()));
    }
    let data = SegData::from_entries(manifest, &test, net.task)?;
    let preds = data.volumes.iter().map(|v| net.predict(v)).collect::<Result<Vec<_>>>()?;
    DiceReport::compute(&preds, &data.targets, &net.task.foreground())
}

/// `100 · (rs − r) / r`.
pub fn improvement_pct(r: f64, rs: f64) -> f64 {
    100.0 * (rs - r) / r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
}

impl SeedStats {
    pub fn new(values: Vec<f64>) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { values, mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub seed: u64,
    pub arm: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub arch: Arch,
    pub task: SegTask,
    pub real: Option<SeedStats>,
    pub augmented: Option<SeedStats>,
    /// Improvement of the seed-mean Dice; `None` if an arm failed or the R mean is 0.
    pub improvement_pct: Option<f64>,
    /// Per-seed `Dice(R+S) − Dice(R)` over seeds where both arms succeeded.
    pub delta: Option<SeedStats>,
    pub failures: Vec<CellFailure>,
}

impl ReportRow {
    pub fn succeeded(&self) -> bool {
        self.real.is_some() && self.augmented.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationReport {
    pub seeds: Vec<u64>,
    pub n_real_train: usize,
    /// Synthetic pairs used per R+S run.
    pub n_synthetic: usize,
    pub n_test: usize,
    pub rows: Vec<ReportRow>,
}

impl AugmentationReport {
    pub fn any_succeeded(&self) -> bool {
        self.rows.iter().any(ReportRow::succeeded)
    }

    /// Text table with the R / R + S / Improvement layout.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<10} | {:<12} | {:>17} | {:>17} | {:>12} | {:>17}\n",
            "CNN Model", "Segmentation", "R", "R + S", "Improvement", "Δ Dice (mean±std)"
        );
        out += &format!("{}\n", "-".repeat(100));
        let fmt = |s: &Option<SeedStats>| match s {
            Some(s) => format!("{:.4} ± {:.4}", s.mean, s.std),
            None => "failed".into(),
        };
        for r in &self.rows {
            let imp = match r.improvement_pct {
                Some(p) => format!("{p:+.3}%"),
                None if r.succeeded() => "n/a".into(),
                None => "failed".into(),
            };
            out += &format!(
                "{:<10} | {:<12} | {:>17} | {:>17} | {:>12} | {:>17}\n",
                r.arch.title(),
                r.task.title(),
                fmt(&r.real),
                fmt(&r.augmented),
                imp,
                r.delta.as_ref().map_or("-".into(), |d| format!("{:+.4} ± {:.4}", d.mean, d.std)),
            );
        }
        out += &format!(
            "seeds {:?}; {} real train + {} synthetic; {} real test items\n",
            self.seeds, self.n_real_train, self.n_synthetic, self.n_test
        );
        out
    }
}

/// Trains every (architecture, task, seed) cell on R and on R+S and scores
/// both on the real test split. Failed cells are recorded and skipped.
pub fn run_augmentation_experiment(
    real: &DatasetManifest,
    synthetic: &DatasetManifest,
    tasks: &[SegTask],
    archs: &[Arch],
    cfg: &SegTrainConfig,
    n_seeds: usize,
) -> Result<AugmentationReport> {
    if real.split(Split::Train).is_empty() || real.split(Split::Test).is_empty() {
        return Err(Error::Input("real manifest needs train and test items".into()));
    }
    if synthetic.is_empty() {
        return Err(Error::Input("synthetic manifest is empty".into()));
    }
    if n_seeds == 0 || tasks.is_empty() || archs.is_empty() {
        return Err(Error::Config("need at least one seed, task and architecture".into()));
    }
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|k| cfg.seed.wrapping_add(k)).collect();
    let mut rows = Vec::new();
    for &arch in archs {
        for &task in tasks {
            let mut real_d = Vec::new();
            let mut aug_d = Vec::new();
            let mut deltas = Vec::new();
            let mut failures = Vec::new();
            for &seed in &seeds {
                let cell_cfg = SegTrainConfig {
                    arch,
                    seed,
                    ..cfg.clone()
                };
                let mut arm = |name: &str, s: Option<&DatasetManifest>| -> Option<f64> {
                    let res = train_segmenter(real, s, task, &cell_cfg).and_then(|(net, _)| evaluate_segmenter(&net, real));
                    match res {
                        Ok(rep) => Some(rep.mean),
                        Err(e) => {
                            log::warn!("{} {} seed {seed} {name} failed: {e}", arch.name(), task.name());
                            failures.push(CellFailure {
                                seed,
                                arm: name.into(),
                                error: e.to_string(),
                            });
                            None
                        }
                    }
                };
                let r = arm("R", None);
                let rs = arm("R+S", Some(synthetic));
                if let Some(r) = r {
                    real_d.push(r);
                }
                if let Some(rs) = rs {
                    aug_d.push(rs);
                }
                if let (Some(r), Some(rs)) = (r, rs) {
                    deltas.push(rs - r);
                }
            }
            let real_s = SeedStats::new(real_d);
            let aug_s = SeedStats::new(aug_d);
            let improvement = match (&real_s, &aug_s) {
                (Some(r), Some(a)) if r.mean > 0.0 => Some(improvement_pct(r.mean, a.mean)),
                _ => None,
            };
            rows.push(ReportRow {
                arch,
                task,
                real: real_s,
                augmented: aug_s,
                improvement_pct: improvement,
                delta: SeedStats::new(deltas),
                failures,
            });
        }
    }
    Ok(AugmentationReport {
        seeds,
        n_real_train: real.split(Split::Train).len(),
        n_synthetic: synthetic
            .entries
            .iter()
            .filter(|e| e.provenance == Provenance::Synthetic)
            .count()
            .min(real.split(Split::Train).len()),
        n_test: real.split(Split::Test).len(),
        rows,
    })
}
