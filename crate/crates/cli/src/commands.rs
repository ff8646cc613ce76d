use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lldm_core::data::{build_dataset, DatasetManifest, LabelMap, Volume, CLASS_NAMES, N_CLASSES};
use lldm_core::eval::{write_montage, DiceReport, FeatureExtractor, FidReport, View};
use lldm_core::pipeline::{run_training, synthesize_dataset, Checkpoints, Stage, StageRequest};
use lldm_core::segment::{run_augmentation_experiment, Arch, SegTask};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Cli, Command, EvalArgs, ExperimentArgs, GenDataArgs, StageArg, SynthArgs, TrainArgs};

/// Bad flag values found after parsing; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.resolve(cli.seed, cli.out, cli.verbose);
    init_logging(cfg.verbosity);
    match cli.command {
        Command::GenData(a) => gen_data(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Synthesize(a) => synthesize(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Experiment(a) => experiment(cfg, a),
    }
}

fn init_logging(verbosity: u8) {
    let level = match verbosity {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
}

#[derive(Serialize)]
struct Echo<'a> {
    command: &'a str,
    argv: Vec<String>,
    config: &'a RunConfig,
}

/// Writes the resolved configuration and command line next to the outputs.
fn echo(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let e = Echo {
        command,
        argv: std::env::args().collect(),
        config: cfg,
    };
    let path = dir.join(format!("{command}.config.json"));
    fs::write(&path, serde_json::to_string_pretty(&e)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_report<T: Serialize>(cfg: &RunConfig, name: &str, value: &T, table: &str) -> Result<PathBuf> {
    let dir = cfg.reports_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let json = dir.join(format!("{name}.json"));
    fs::write(&json, serde_json::to_string_pretty(value)?)?;
    fs::write(dir.join(format!("{name}.txt")), table)?;
    Ok(json)
}

fn generate(cfg: &RunConfig, n: usize) -> Result<DatasetManifest> {
    let p = &cfg.pipeline;
    let m = build_dataset(n, cfg.seed(), &p.data.spec, &p.data.ratios, &cfg.data_dir())?;
    echo(&cfg.data_dir(), "gen-data", cfg)?;
    Ok(m)
}

fn gen_data(mut cfg: RunConfig, a: GenDataArgs) -> Result<()> {
    cfg.pipeline.data.n_phantoms = a.n;
    let m = generate(&cfg, a.n)?;
    println!("{} phantoms -> {}", m.len(), m.root.join("manifest.json").display());
    Ok(())
}

fn train(cfg: RunConfig, a: TrainArgs) -> Result<()> {
    cfg.pipeline.validate()?;
    let request = match a.stage {
        StageArg::All => StageRequest::All,
        StageArg::VaeVol => StageRequest::Only(Stage::VaeVol),
        StageArg::VaeLabel => StageRequest::Only(Stage::VaeLabel),
        StageArg::LdmLabel => StageRequest::Only(Stage::LdmLabel),
        StageArg::Controlnet => StageRequest::Only(Stage::ControlNet),
    };
    let manifest = match &a.data {
        Some(p) => DatasetManifest::load(p)?,
        None if cfg.data_dir().join("manifest.json").is_file() => DatasetManifest::load(&cfg.data_dir())?,
        None => {
            log::info!("no dataset under {}, generating one", cfg.data_dir().display());
            generate(&cfg, cfg.pipeline.data.n_phantoms)?
        }
    };
    let ckpt = cfg.checkpoint_dir();
    echo(&ckpt, "train", &cfg)?;
    let report = run_training(&cfg.pipeline, &manifest, &ckpt, request)?;
    for s in &report.reused {
        println!("{s}: reused");
    }
    for s in &report.trained {
        let mut line = format!("{}: {} steps in {:.1}s, final loss {:.5}", s.stage, s.steps, s.seconds, s.final_loss);
        if let Some(r) = s.reconstruction {
            line += &format!(", reconstruction {r:.5}");
        }
        if let Some(d) = s.probe_drop() {
            line += &format!(", probe loss drop {:.1}%", 100.0 * d);
        }
        println!("{line}");
    }
    Ok(())
}

fn synthesize(cfg: RunConfig, a: SynthArgs) -> Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let ck = Checkpoints::load(&cfg.checkpoint_dir())?;
    let dir = cfg.synth_dir();
    echo(&dir, "synthesize", &cfg)?;
    let m = synthesize_dataset(&ck, a.n, cfg.seed(), &dir)?;
    println!("{} pairs -> {}", m.len(), dir.join("manifest.json").display());
    if a.montage {
        let items = m
            .entries
            .iter()
            .take(8)
            .map(|e| {
                let (v, l) = m.load_pair(e)?;
                Ok((v, Some(l)))
            })
            .collect::<lldm_core::Result<Vec<_>>>()?;
        for view in [View::Axial, View::Sagittal, View::Coronal] {
            let path = dir.join(format!("montage_{}.png", view.name()));
            write_montage(&path, &items, view, 4)?;
            println!("montage -> {}", path.display());
        }
    }
    Ok(())
}

fn load_volumes(m: &DatasetManifest) -> Result<Vec<Volume>> {
    Ok(m.entries.iter().map(|e| m.load_volume(e)).collect::<lldm_core::Result<_>>()?)
}

fn eval(cfg: RunConfig, a: EvalArgs) -> Result<()> {
    let ma = DatasetManifest::load(&a.a).with_context(|| format!("loading {}", a.a.display()))?;
    let mb = DatasetManifest::load(&a.b).with_context(|| format!("loading {}", a.b.display()))?;
    echo(&cfg.reports_dir(), "eval", &cfg)?;
    if a.dice {
        let mut pred = Vec::new();
        let mut gt: Vec<LabelMap> = Vec::new();
        for e in &ma.entries {
            let Some(r) = mb.entries.iter().find(|r| r.id == e.id) else {
                bail!("entry {} of {} has no counterpart in {}", e.id, a.a.display(), a.b.display());
            };
            pred.push(ma.load_labels(e)?);
            gt.push(mb.load_labels(r)?);
        }
        let classes: Vec<u8> = (1..N_CLASSES as u8).collect();
        let report = DiceReport::compute(&pred, &gt, &classes)?;
        let table = report.table(&CLASS_NAMES[1..]);
        let path = write_report(&cfg, a.name.as_deref().unwrap_or("dice"), &report, &table)?;
        print!("{table}");
        println!("report -> {}", path.display());
        return Ok(());
    }
    let va = load_volumes(&ma)?;
    let vb = load_volumes(&mb)?;
    let (report, default_name) = if a.per_view {
        let ext = FeatureExtractor::new(cfg.extractor_2d.clone())?;
        (FidReport::compute(&va, &vb, None, Some(&ext))?, "fid_per_view")
    } else {
        let ext = FeatureExtractor::new(cfg.extractor_3d.clone())?;
        (FidReport::compute(&va, &vb, Some(&ext), None)?, "fid")
    };
    let table = report.table(&a.method);
    let path = write_report(&cfg, a.name.as_deref().unwrap_or(default_name), &report, &table)?;
    print!("{table}");
    println!("report -> {}", path.display());
    Ok(())
}

fn experiment(mut cfg: RunConfig, a: ExperimentArgs) -> Result<()> {
    let tasks = a
        .tasks
        .iter()
        .map(|t| SegTask::parse(t).ok_or_else(|| usage(format!("unknown task {t:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let archs = a
        .arch
        .iter()
        .map(|t| Arch::parse(t).ok_or_else(|| usage(format!("unknown architecture {t:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    if let Some(s) = a.max_steps {
        cfg.segment.max_steps = s;
    }
    cfg.segment.seed = cfg.seed();
    let real = DatasetManifest::load(&a.real.clone().unwrap_or_else(|| cfg.data_dir()))?;
    let synth = DatasetManifest::load(&a.synth.clone().unwrap_or_else(|| cfg.synth_dir()))?;
    echo(&cfg.reports_dir(), "experiment", &cfg)?;
    let report = run_augmentation_experiment(&real, &synth, &tasks, &archs, &cfg.segment, a.seeds)?;
    let table = report.table();
    let path = write_report(&cfg, "experiment", &report, &table)?;
    print!("{table}");
    println!("report -> {}", path.display());
    for row in report.rows.iter().filter(|r| !r.failures.is_empty()) {
        for f in &row.failures {
            eprintln!("failed: {} {} seed {} {}: {}", row.arch.name(), row.task.name(), f.seed, f.arm, f.error);
        }
    }
    if !report.any_succeeded() {
        bail!("every experiment cell failed");
    }
    Ok(())
}
