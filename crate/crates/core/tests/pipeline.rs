use std::path::{Path, PathBuf};

use xaimi::checkpoint;
use xaimi::experiment::{paths, Experiment, ExperimentConfig, RunManifest, Stage};
use xaimi::inversion::{BreachStore, InversionModel};
use xaimi::metrics::{read_rows_csv, MetricsReport};
use xaimi::zoo::Classifier;
use xaimi::Error;

fn smoke(dir: &Path) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mnist_smoke.toml");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.run.output_dir = dir.to_path_buf();
    cfg
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn stages_refuse_missing_prerequisites() {
    let tmp = tempfile::tempdir().unwrap();
    let mut exp = Experiment::open(smoke(tmp.path())).unwrap();
    for stage in [Stage::Breach, Stage::TrainInversion, Stage::Evaluate, Stage::Report] {
        match exp.run_stage(stage) {
            Err(Error::MissingPrerequisite { stage: s, .. }) => assert_eq!(s, stage.as_str()),
            other => panic!("{stage}: expected a prerequisite error, got {other:?}"),
        }
    }
}

#[test]
fn config_change_is_refused_on_existing_output() {
    let tmp = tempfile::tempdir().unwrap();
    Experiment::open(smoke(tmp.path())).unwrap();
    let mut changed = smoke(tmp.path());
    changed.run.seed += 1;
    assert!(matches!(Experiment::open(changed), Err(Error::Config(_))));
}

#[test]
fn smoke_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = smoke(dir);
    let mut exp = Experiment::open(cfg.clone()).unwrap();
    let outcomes = exp.run_all().unwrap();
    assert_eq!(outcomes.len(), Stage::ALL.len());
    assert!(outcomes.iter().all(|o| !o.skipped));

    let manifest: RunManifest = xaimi::io::read_json(&RunManifest::path(dir)).unwrap();
    assert!(Stage::ALL.iter().all(|&s| manifest.is_complete(s)));
    assert_eq!(manifest.config_hash, cfg.hash());

    // breach stores carry provenance and only attacker-side indices
    let plan: xaimi::data::SplitPlan = xaimi::io::read_json(&dir.join(paths::SPLITS)).unwrap();
    for rel in [paths::BREACH_TRAIN, paths::BREACH_TEST] {
        let store = BreachStore::open(&dir.join(rel)).unwrap();
        assert_eq!(store.manifest().split_checksum, plan.checksum());
        for t in store.load().unwrap() {
            assert!(plan.is_attack_index(t.source_index.unwrap()));
        }
    }

    // every configured run plus both surrogate runs is measured
    let reports: std::collections::BTreeMap<String, MetricsReport> =
        xaimi::io::read_json(&dir.join(paths::AGGREGATES)).unwrap();
    for key in cfg.runs() {
        assert!(reports.contains_key(&key.id()), "{}", key.id());
    }
    assert!(reports.contains_key("surrogate-rs_cam") && reports.contains_key("surrogate-s_cam"));
    let rows = read_rows_csv(&dir.join(paths::INSTANCES)).unwrap();
    assert_eq!(rows.len(), reports.len() * plan.attack_test_indices.len() * 6);
    for f in ["report.md", "figures/ssim.svg", "figures/reconstructions.png", "metrics/comparisons.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }

    // checkpoints reload bitwise
    for rel in [paths::TARGET, paths::EVAL] {
        let m = Classifier::load(&dir.join(rel)).unwrap();
        let copy = tempfile::tempdir().unwrap();
        m.save(copy.path()).unwrap();
        assert_eq!(checkpoint::digest(copy.path()).unwrap(), checkpoint::digest(&dir.join(rel)).unwrap());
    }
    let inv_dir = dir.join(paths::INVERSION).join("flatten_unet-grad_cam/model");
    let inv = InversionModel::load(&inv_dir).unwrap();
    let copy = tempfile::tempdir().unwrap();
    inv.save(copy.path()).unwrap();
    assert_eq!(checkpoint::digest(copy.path()).unwrap(), checkpoint::digest(&inv_dir).unwrap());

    // a second invocation is a no-op
    let before: Vec<(PathBuf, Vec<u8>)> =
        files_under(dir).into_iter().map(|p| (p.clone(), std::fs::read(&p).unwrap())).collect();
    let mut again = Experiment::open(cfg).unwrap();
    assert!(again.run_all().unwrap().iter().all(|o| o.skipped));
    let after: Vec<(PathBuf, Vec<u8>)> =
        files_under(dir).into_iter().map(|p| (p.clone(), std::fs::read(&p).unwrap())).collect();
    assert!(before == after, "rerun modified artifacts");
}
