use std::fs;
use std::path::Path;

use lldm_core::data::{build_dataset, DatasetManifest};
use lldm_core::pipeline::{
    read_summary, run_training, stage_complete, stage_dir, synthesize_dataset, synthesize_pair, Checkpoints,
    PipelineConfig, Stage, StageRequest,
};
use lldm_core::Error;

fn dataset(cfg: &PipelineConfig, dir: &Path) -> DatasetManifest {
    build_dataset(cfg.data.n_phantoms, cfg.seed, &cfg.data.spec, &cfg.data.ratios, dir).unwrap()
}

fn checksums(ckpt: &Path) -> Vec<String> {
    Stage::ALL.iter().map(|&s| read_summary(ckpt, s).unwrap().checksum).collect()
}

#[test]
fn staged_training_resumes_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::tiny();
    let m = dataset(&cfg, &tmp.path().join("data"));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");

    let first = run_training(&cfg, &m, &a, StageRequest::All).unwrap();
    assert_eq!(first.trained.len(), 4);
    assert!(first.reused.is_empty());
    for s in &first.trained {
        assert!(s.final_loss.is_finite());
        assert!(stage_dir(&a, s.stage).join("log.csv").is_file());
    }
    assert!(stage_dir(&a, Stage::ControlNet).join("log_base.csv").is_file());

    run_training(&cfg, &m, &b, StageRequest::All).unwrap();
    assert_eq!(checksums(&a), checksums(&b));
    for s in Stage::ALL {
        let log = |root: &Path| fs::read(stage_dir(root, s).join("log.csv")).unwrap();
        assert_eq!(log(&a), log(&b), "{s}");
    }

    let again = run_training(&cfg, &m, &a, StageRequest::All).unwrap();
    assert!(again.trained.is_empty());
    assert_eq!(again.reused, Stage::ALL.to_vec());

    // Losing stage 3 retrains stages 3 and 4 only.
    let before = checksums(&a);
    fs::remove_dir_all(stage_dir(&a, Stage::LdmLabel)).unwrap();
    let resumed = run_training(&cfg, &m, &a, StageRequest::All).unwrap();
    let trained: Vec<Stage> = resumed.trained.iter().map(|s| s.stage).collect();
    assert_eq!(trained, vec![Stage::LdmLabel, Stage::ControlNet]);
    assert_eq!(resumed.reused, vec![Stage::VaeVol, Stage::VaeLabel]);
    assert_eq!(checksums(&a), before);
}

#[test]
fn single_stage_requests_check_prerequisites() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::tiny();
    let m = dataset(&cfg, &tmp.path().join("data"));
    let ck = tmp.path().join("ck");

    match run_training(&cfg, &m, &ck, StageRequest::Only(Stage::LdmLabel)) {
        Err(Error::MissingCheckpoint { stage, .. }) => assert_eq!(stage, "vae-label"),
        other => panic!("expected a missing vae-label checkpoint, got {:?}", other.map(|r| r.trained.len())),
    }
    run_training(&cfg, &m, &ck, StageRequest::Only(Stage::VaeLabel)).unwrap();
    run_training(&cfg, &m, &ck, StageRequest::Only(Stage::VaeVol)).unwrap();
    match run_training(&cfg, &m, &ck, StageRequest::Only(Stage::ControlNet)) {
        Err(Error::MissingCheckpoint { stage, .. }) => assert_eq!(stage, "ldm-label"),
        other => panic!("expected a missing ldm-label checkpoint, got {:?}", other.map(|r| r.trained.len())),
    }
    run_training(&cfg, &m, &ck, StageRequest::Only(Stage::LdmLabel)).unwrap();
    run_training(&cfg, &m, &ck, StageRequest::Only(Stage::ControlNet)).unwrap();
    assert!(Stage::ALL.iter().all(|&s| stage_complete(&ck, s)));

    // Retraining an upstream stage invalidates what was built on it.
    run_training(&cfg, &m, &ck, StageRequest::Only(Stage::VaeLabel)).unwrap();
    assert!(!stage_complete(&ck, Stage::LdmLabel));
    assert!(!stage_complete(&ck, Stage::ControlNet));
    assert!(stage_complete(&ck, Stage::VaeVol));
}

#[test]
fn synthesis_is_seeded_and_prefix_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::tiny();
    let m = dataset(&cfg, &tmp.path().join("data"));
    let ckpt = tmp.path().join("ck");
    run_training(&cfg, &m, &ckpt, StageRequest::All).unwrap();
    let ck = Checkpoints::load(&ckpt).unwrap();
    assert_eq!(ck.identifiers().len(), 4);

    let p = synthesize_pair(&ck, 3).unwrap();
    let q = synthesize_pair(&ck, 3).unwrap();
    assert_eq!(p.label, q.label);
    assert_eq!(p.volume, q.volume);
    assert_eq!(p.volume.shape(), cfg.grid());
    assert!(p.volume.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let short = synthesize_dataset(&ck, 2, 10, &tmp.path().join("s2")).unwrap();
    let long = synthesize_dataset(&ck, 3, 10, &tmp.path().join("s3")).unwrap();
    assert_eq!(long.entries.len(), 3);
    for (a, b) in short.entries.iter().zip(&long.entries) {
        assert_eq!(a.id, b.id);
        assert_eq!(short.load_pair(a).unwrap(), long.load_pair(b).unwrap());
    }
    assert!(long.entries.iter().all(|e| e.id.starts_with("synth_")));
}
