//! Stage runner: each stage reads earlier artifacts from the output
//! directory, writes its own, and appends a record to the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use xaimi_nn::parallel::map_chunks;

use super::config::{ExperimentConfig, RunKey, SURROGATE_RS_CAM, SURROGATE_S_CAM};
use super::manifest::{RunManifest, Stage, StageRecord};
use super::{analyze, report};
use crate::checkpoint;
use crate::data::{self, DatasetProfile, LabeledImageCollection, SplitPlan};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::inversion::{train_inversion, validation_split, BreachStore, BreachedTuple, InversionModel};
use crate::io;
use crate::metrics::{
    aggregate, compare_runs, embedding_similarity_from, mse, psnr_from_mse, ssim, write_rows_csv, MetricRow,
    MetricsReport, PairedComparison, RunMetadata,
};
use crate::spec::{ExplanationShape, InversionSpec, ModelSpec};
use crate::surrogate::{
    assert_attack_only, evaluate_explanation_inverter, reconstruct_explanations, surrogate_cams, surrogate_tuples,
    SurrogateBundle, SurrogateMode, SurrogateTraining,
};
use crate::xai::{explain, ExplanationKind};
use crate::zoo::{train_classifier, Classifier, TrainingConfig, TrainingLog};
use crate::Parallelism;

/// Tuples written per breach-store part.
const BREACH_PART: usize = 1000;
const METRIC_CHUNK: usize = 32;

/// Metric names, in CSV order.
pub const METRICS: [&str; 6] = ["mse", "pixel_similarity", "ssim", "psnr", "attack_correct", "embedding_similarity"];

pub mod paths {
    pub const CACHE: &str = "data/cache";
    pub const SPLITS: &str = "data/splits.json";
    pub const TARGET: &str = "models/target";
    pub const EVAL: &str = "models/eval";
    pub const ACCURACY: &str = "models/accuracy.json";
    pub const BREACH_TRAIN: &str = "breach/attack_train";
    pub const BREACH_TEST: &str = "breach/attack_test";
    pub const INVERSION: &str = "inversion";
    pub const SURROGATE: &str = "surrogate";
    pub const BUNDLE: &str = "surrogate/bundle";
    pub const S_CAM_INVERTER: &str = "surrogate/s_cam_inverter";
    pub const INSTANCES: &str = "metrics/instances.csv";
    pub const AGGREGATES: &str = "metrics/aggregates.json";
    pub const COMPARISONS: &str = "metrics/comparisons.json";
    pub const RECONSTRUCTIONS: &str = "reconstructions";
    pub const ANALYSIS: &str = "analysis";
    pub const FIGURES: &str = "figures";
    pub const REPORT: &str = "report.md";
}

/// Held-out accuracies from `train-target`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub target_heldout: f64,
    pub eval_heldout: f64,
    /// Eval model on original attack-test images.
    pub eval_attack_test: f64,
}

/// Outcome of [`Experiment::run_stage`].
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    /// The stage was already complete; nothing was touched.
    pub skipped: bool,
    pub record: StageRecord,
}

type StageResult = (Vec<String>, BTreeMap<String, serde_json::Value>);

pub struct Experiment {
    cfg: ExperimentConfig,
    dir: PathBuf,
    manifest: RunManifest,
    mode: Parallelism,
}

impl Experiment {
    /// Validates `cfg` and opens (or starts) its output directory.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.run.output_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let hash = cfg.hash();
        let manifest = RunManifest::open_or_create(&dir, &cfg.run.name, &hash)?;
        let snapshot = dir.join("config.json");
        if !snapshot.exists() {
            io::write_json(&snapshot, &cfg)?;
        }
        let mode = cfg.parallelism();
        Ok(Self { cfg, dir, manifest, mode })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Runs one stage. A completed stage is a no-op.
    pub fn run_stage(&mut self, stage: Stage) -> Result<StageOutcome> {
        if let Some(r) = self.manifest.record(stage) {
            log::info!("{stage}: already complete, skipping");
            return Ok(StageOutcome { stage, skipped: true, record: r.clone() });
        }
        self.manifest.check_prerequisites(stage, self.cfg.surrogate.enabled)?;
        log::info!("{stage}: starting");
        let start = Instant::now();
        let (artifacts, summary) = match stage {
            Stage::TrainTarget => self.train_target()?,
            Stage::Breach => self.breach()?,
            Stage::TrainInversion => self.train_inversion()?,
            Stage::TrainSurrogate => self.train_surrogate()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Analyze => self.analyze()?,
            Stage::Report => self.report()?,
        };
        let record = StageRecord {
            stage,
            config_hash: self.manifest.config_hash.clone(),
            wall_clock_seconds: start.elapsed().as_secs_f64(),
            artifacts,
            summary,
        };
        self.manifest.append(&self.dir, record.clone())?;
        log::info!("{stage}: done in {:.1}s", record.wall_clock_seconds);
        Ok(StageOutcome { stage, skipped: false, record })
    }

    /// Every stage in pipeline order.
    pub fn run_all(&mut self) -> Result<Vec<StageOutcome>> {
        Stage::ALL.into_iter().map(|s| self.run_stage(s)).collect()
    }

    fn profile(&self) -> DatasetProfile {
        self.cfg.profile().expect("validated on open")
    }

    fn load_data(&self) -> Result<LabeledImageCollection> {
        data::read_cache(&self.path(paths::CACHE))
    }

    fn load_splits(&self) -> Result<SplitPlan> {
        let plan: SplitPlan = io::read_json(&self.path(paths::SPLITS))?;
        match &self.manifest.split_checksum {
            Some(ck) if *ck != plan.checksum() => {
                Err(Error::Provenance(format!("{} does not match the manifest checksum", paths::SPLITS)))
            }
            _ => Ok(plan),
        }
    }

    fn classifier_spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec::target_for(&self.profile())?.scaled(self.cfg.scale.classifier_divisor))
    }

    /// Removes a partial artifact left by an interrupted stage.
    fn clear(&self, rel: &str) -> Result<()> {
        let p = self.path(rel);
        if p.exists() {
            log::warn!("removing partial artifact {}", p.display());
            fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    fn train_target(&mut self) -> Result<StageResult> {
        let profile = self.profile();
        let cache = self.path(paths::CACHE);
        let sidecar = if cache.join("dataset.json").exists() {
            io::read_json::<data::CacheSidecar>(&cache.join("dataset.json"))?
        } else {
            let mut c = data::load_dataset(&profile, &self.cfg.data.source, self.mode)?;
            if self.cfg.data.limit > 0 && self.cfg.data.limit < c.len() {
                // a seeded draw: source files may be ordered by class
                let mut idx: Vec<usize> = (0..c.len()).collect();
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cfg.derive_seed("limit", 0)));
                idx.truncate(self.cfg.data.limit);
                idx.sort_unstable();
                c = c.subset(&idx);
            }
            data::write_cache(&c, &cache)?
        };
        let data = self.load_data()?;
        let plan = data::make_splits(data.len(), self.cfg.derive_seed("split", 0))?;
        io::write_json(&self.path(paths::SPLITS), &plan)?;
        let dataset_ck = io::sha256_bytes(format!("{}{}", sidecar.images_sha256, sidecar.labels_sha256).as_bytes());
        self.manifest.set_checksums(&self.dir, plan.checksum(), dataset_ck)?;

        let spec = self.classifier_spec()?;
        let tcfg = self.cfg.training("target", &self.cfg.target);
        let (target, tlog, target_acc) = fit_classifier(spec.clone(), &data, &plan.target_indices, &tcfg, self.mode)?;
        let target_sha = target.save(&self.path(paths::TARGET))?;
        io::write_json(&self.path("models/target_log.json"), &tlog)?;

        // the eval model sees every image except the attack test split
        let mut eval_idx = plan.target_indices.clone();
        eval_idx.extend_from_slice(&plan.attack_train_indices);
        eval_idx.sort_unstable();
        let ecfg = self.cfg.training("eval", &self.cfg.eval);
        let (eval, elog, eval_acc) = fit_classifier(spec, &data, &eval_idx, &ecfg, self.mode)?;
        eval.save(&self.path(paths::EVAL))?;
        io::write_json(&self.path("models/eval_log.json"), &elog)?;

        let test_imgs: Vec<&ImageTensor> = plan.attack_test_indices.iter().map(|&i| &data.images[i]).collect();
        let test_labels: Vec<usize> = plan.attack_test_indices.iter().map(|&i| data.labels[i]).collect();
        let clean = eval.accuracy(&test_imgs, &test_labels, self.mode)?;
        let acc = AccuracySummary { target_heldout: target_acc, eval_heldout: eval_acc, eval_attack_test: clean };
        io::write_json(&self.path(paths::ACCURACY), &acc)?;
        log::info!("target held-out {target_acc:.4}, eval held-out {eval_acc:.4}, eval on attack test {clean:.4}");

        let summary = BTreeMap::from([
            ("instances".into(), json!(data.len())),
            ("target_sha256".into(), json!(target_sha)),
            ("target_heldout_accuracy".into(), json!(target_acc)),
            ("eval_heldout_accuracy".into(), json!(eval_acc)),
            ("eval_attack_test_accuracy".into(), json!(clean)),
        ]);
        let artifacts =
            [paths::CACHE, paths::SPLITS, paths::TARGET, paths::EVAL, paths::ACCURACY].map(String::from).to_vec();
        Ok((artifacts, summary))
    }

    fn breach(&mut self) -> Result<StageResult> {
        let data = self.load_data()?;
        let plan = self.load_splits()?;
        let target = Classifier::load(&self.path(paths::TARGET))?;
        let target_ck = checkpoint::digest(&self.path(paths::TARGET))?;
        let kinds: Vec<(ExplanationKind, ExplanationShape)> =
            self.cfg.breach_kinds().into_iter().map(|k| Ok((k, k.shape_for(&target)?))).collect::<Result<_>>()?;
        let mut summary = BTreeMap::new();
        for (rel, split, idx) in [
            (paths::BREACH_TRAIN, "attack_train", &plan.attack_train_indices),
            (paths::BREACH_TEST, "attack_test", &plan.attack_test_indices),
        ] {
            assert_attack_only(&plan, idx)?;
            self.clear(rel)?;
            let mut store = BreachStore::create(
                &self.path(rel),
                &self.cfg.run.name,
                target.class_count(),
                kinds.clone(),
                &target_ck,
                &plan.checksum(),
                split,
            )?;
            for part in idx.chunks(BREACH_PART) {
                let tuples = query_target(&target, &data, part, &kinds, &self.cfg.run.name, self.mode)?;
                store.append(&tuples)?;
            }
            summary.insert(format!("{split}_tuples"), json!(store.manifest().count()));
        }
        Ok((vec![paths::BREACH_TRAIN.into(), paths::BREACH_TEST.into()], summary))
    }

    fn inversion_dir(&self, key: &RunKey) -> PathBuf {
        self.path(&format!("{}/{}", paths::INVERSION, key.id()))
    }

    fn train_inversion(&mut self) -> Result<StageResult> {
        let data = self.load_data()?;
        let store = BreachStore::open(&self.path(paths::BREACH_TRAIN))?;
        let shapes: BTreeMap<ExplanationKind, ExplanationShape> = store
            .manifest()
            .explanation_kinds
            .iter()
            .copied()
            .zip(store.manifest().explanation_shapes.iter().copied())
            .collect();
        let tuples = store.load()?;
        let profile = self.profile();
        let mut artifacts = Vec::new();
        let mut summary = BTreeMap::new();
        for key in self.cfg.runs() {
            let id = key.id();
            let dir = self.inversion_dir(&key);
            artifacts.push(format!("{}/{id}", paths::INVERSION));
            // finished runs from an interrupted stage are kept
            if dir.join("training_log.json").exists() {
                log::info!("inversion {id}: already trained");
                continue;
            }
            self.clear(&format!("{}/{id}", paths::INVERSION))?;
            let shape = match key.explanation {
                Some(k) => Some(
                    *shapes
                        .get(&k)
                        .ok_or_else(|| Error::Config(format!("breach store lacks {} explanations", k.as_str())))?,
                ),
                None => None,
            };
            let spec = InversionSpec::build(key.method, &profile, shape, self.cfg.scale.inversion_divisor)?;
            let model =
                InversionModel::build(spec, key.explanation, self.cfg.derive_seed(&format!("inversion/{id}/init"), 0))?;
            let tcfg = self.cfg.training(&format!("inversion/{id}"), &self.cfg.inversion);
            log::info!("inversion {id}: training");
            let (model, tlog) = train_inversion(model, &tuples, &data.images, &tcfg, self.mode)?;
            model.save(&dir.join("model"))?;
            io::write_json(&dir.join("training_log.json"), &tlog)?;
            summary.insert(id, json!(tlog.epochs.last().and_then(|e| e.validation_loss)));
        }
        Ok((artifacts, summary))
    }

    fn train_surrogate(&mut self) -> Result<StageResult> {
        if !self.cfg.surrogate.enabled {
            return Ok((Vec::new(), BTreeMap::from([("enabled".into(), json!(false))])));
        }
        self.clear(paths::SURROGATE)?;
        let s = self.cfg.surrogate.clone();
        let data = self.load_data()?;
        let plan = self.load_splits()?;
        let profile = self.profile();
        let div = self.cfg.scale.inversion_divisor;
        let train = BreachStore::open(&self.path(paths::BREACH_TRAIN))?.load()?;
        let indices = source_indices(&train)?;
        let preds: Vec<_> = train.iter().map(|t| t.prediction.clone()).collect();
        let images: Vec<&ImageTensor> = indices.iter().map(|&i| &data.images[i]).collect();

        let st = SurrogateTraining::new(s.mode);
        let (st, slog) = st.train_surrogate(
            self.classifier_spec()?,
            &data,
            &plan.attack_train_indices,
            &plan,
            &self.cfg.training("surrogate/classifier", &s.classifier),
            self.mode,
        )?;
        let ecfg = self.cfg.training("surrogate/explanation_inverter", &s.explanation_inverter);
        let (st, elog) = st.train_explanation_inverter(&images, &preds, div, &ecfg, self.mode)?;
        let icfg = self.cfg.training("surrogate/image_inverter", &s.image_inverter);
        let (st, ilog) =
            st.train_image_inverter(s.method, &profile, &data, &indices, &plan, &preds, div, &icfg, self.mode)?;
        let bundle = st.finish()?;
        let bm = bundle.save(&self.path(paths::BUNDLE), &plan.checksum())?;
        let mut logs: BTreeMap<&str, TrainingLog> =
            BTreeMap::from([("classifier", slog), ("explanation_inverter", elog), ("image_inverter", ilog)]);
        let mut artifacts = vec![paths::BUNDLE.to_string()];

        // an image inverter trained and queried on directly computed s-CAMs
        if s.mode == SurrogateMode::TrainOnRsCam {
            let cams = surrogate_cams(&bundle.surrogate, &images, self.mode)?;
            let tuples = surrogate_tuples(&preds, cams, &indices, SURROGATE_S_CAM)?;
            let shape = bundle.cam_shape();
            let spec = InversionSpec::build(s.method, &profile, Some(shape), div)?;
            let model = InversionModel::build(spec, Some(ExplanationKind::GradCam), icfg.seed)?;
            let (model, l) = train_inversion(model, &tuples, &data.images, &icfg, self.mode)?;
            model.save(&self.path(paths::S_CAM_INVERTER))?;
            logs.insert("s_cam_inverter", l);
            artifacts.push(paths::S_CAM_INVERTER.into());
        }
        io::write_json(&self.path("surrogate/training_logs.json"), &logs)?;

        // rs-CAM fidelity and surrogate accuracy on the attack test split
        let test = BreachStore::open(&self.path(paths::BREACH_TEST))?.load()?;
        let test_idx = source_indices(&test)?;
        let test_imgs: Vec<&ImageTensor> = test_idx.iter().map(|&i| &data.images[i]).collect();
        let test_preds: Vec<_> = test.iter().map(|t| t.prediction.clone()).collect();
        let rs = reconstruct_explanations(&bundle.explanation_inverter, &test_preds, self.mode)?;
        let sc = surrogate_cams(&bundle.surrogate, &test_imgs, self.mode)?;
        let er = evaluate_explanation_inverter(&rs, &sc)?;
        io::write_json(&self.path("surrogate/explanation_inverter_report.json"), &er)?;
        let labels: Vec<usize> = test_idx.iter().map(|&i| data.labels[i]).collect();
        let sacc = bundle.surrogate.accuracy(&test_imgs, &labels, self.mode)?;
        let summary = BTreeMap::from([
            ("enabled".into(), json!(true)),
            ("mode".into(), json!(s.mode)),
            ("surrogate_attack_test_accuracy".into(), json!(sacc)),
            ("rs_cam_mse".into(), json!(er.mse)),
            ("rs_cam_zero_map_mse".into(), json!(er.zero_map_mse)),
            ("bundle_surrogate_sha256".into(), json!(bm.surrogate_sha256)),
        ]);
        Ok((artifacts, summary))
    }

    fn evaluate(&mut self) -> Result<StageResult> {
        let data = self.load_data()?;
        let eval = Classifier::load(&self.path(paths::EVAL))?;
        let test = BreachStore::open(&self.path(paths::BREACH_TEST))?.load()?;
        let instances = source_indices(&test)?;
        let plan = self.load_splits()?;
        if instances != plan.attack_test_indices {
            return Err(Error::Provenance("attack test breach store does not follow the split".into()));
        }
        let originals: Vec<&ImageTensor> = instances.iter().map(|&i| &data.images[i]).collect();
        let labels: Vec<usize> = instances.iter().map(|&i| data.labels[i]).collect();
        let ctx = EvalContext {
            eval: &eval,
            instances: &instances,
            originals: &originals,
            labels: &labels,
            z: eval.embed_batch(&originals, self.mode)?,
            sigma: self.cfg.metrics.ssim_sigma,
            mode: self.mode,
        };
        let refs: Vec<&BreachedTuple> = test.iter().collect();
        let profile = self.profile();
        let (h, w) = profile.image_size;
        let array_shape = [instances.len(), profile.channels, h, w];
        let recon_dir = self.path(paths::RECONSTRUCTIONS);
        write_images(&recon_dir.join("originals.npy"), &array_shape, &originals)?;

        let mut runs: Vec<(RunMetadata, Vec<ImageTensor>)> = Vec::new();
        for key in self.cfg.runs() {
            let model = InversionModel::load(&self.inversion_dir(&key).join("model"))?;
            let meta = RunMetadata {
                run_id: key.id(),
                method: key.method.as_str().into(),
                explanation: key.explanation.map(|e| e.as_str().into()),
                dataset: profile.name.clone(),
                seed: self.cfg.run.seed,
            };
            runs.push((meta, model.invert_batch(&refs, self.mode)?));
        }
        if self.cfg.surrogate.enabled {
            let (bundle, _) = SurrogateBundle::load(&self.path(paths::BUNDLE))?;
            let preds: Vec<_> = test.iter().map(|t| t.prediction.clone()).collect();
            let rs = bundle.attack_batch(&preds, self.mode)?;
            let s_inv = match bundle.mode {
                SurrogateMode::TrainOnRsCam => InversionModel::load(&self.path(paths::S_CAM_INVERTER))?,
                SurrogateMode::TrainOnSCam => InversionModel::load(&self.path(paths::BUNDLE).join("image_inverter"))?,
            };
            let cams = surrogate_cams(&bundle.surrogate, &originals, self.mode)?;
            let st = surrogate_tuples(&preds, cams, &instances, SURROGATE_S_CAM)?;
            let st_refs: Vec<&BreachedTuple> = st.iter().collect();
            let s = s_inv.invert_batch(&st_refs, self.mode)?;
            for (id, explanation, recon) in [(SURROGATE_RS_CAM, "rs_cam", rs), (SURROGATE_S_CAM, "s_cam", s)] {
                let meta = RunMetadata {
                    run_id: id.into(),
                    method: "surrogate".into(),
                    explanation: Some(explanation.into()),
                    dataset: profile.name.clone(),
                    seed: self.cfg.run.seed,
                };
                runs.push((meta, recon));
            }
        }

        let mut all_rows = Vec::new();
        let mut reports: BTreeMap<String, MetricsReport> = BTreeMap::new();
        let mut by_run: BTreeMap<String, Vec<MetricRow>> = BTreeMap::new();
        for (meta, recon) in runs {
            let rows = ctx.rows(&meta.run_id, &recon)?;
            let refs: Vec<&ImageTensor> = recon.iter().collect();
            write_images(&recon_dir.join(format!("{}.npy", meta.run_id)), &array_shape, &refs)?;
            log::info!(
                "{}: ssim {:.4}",
                meta.run_id,
                rows.iter().filter(|r| r.metric == "ssim").filter_map(|r| r.value).sum::<f64>()
                    / instances.len() as f64
            );
            reports.insert(meta.run_id.clone(), aggregate(meta.clone(), &rows)?);
            all_rows.extend(rows.iter().cloned());
            by_run.insert(meta.run_id, rows);
        }
        write_rows_csv(&self.path(paths::INSTANCES), &all_rows)?;
        io::write_json(&self.path(paths::AGGREGATES), &reports)?;

        // paired differences against the prediction-only baseline
        let mut comparisons: BTreeMap<String, BTreeMap<String, PairedComparison>> = BTreeMap::new();
        if let Some(base) = by_run.get("prediction_only") {
            for (id, rows) in by_run.iter().filter(|(id, _)| id.as_str() != "prediction_only") {
                let mut m = BTreeMap::new();
                for metric in ["ssim", "attack_correct"] {
                    m.insert(metric.to_string(), compare_runs(base, rows, metric)?);
                }
                comparisons.insert(id.clone(), m);
            }
        }
        io::write_json(&self.path(paths::COMPARISONS), &comparisons)?;
        let summary = BTreeMap::from([
            ("runs".into(), json!(reports.keys().collect::<Vec<_>>())),
            ("instances".into(), json!(instances.len())),
        ]);
        let artifacts = [paths::INSTANCES, paths::AGGREGATES, paths::COMPARISONS, paths::RECONSTRUCTIONS]
            .map(String::from)
            .to_vec();
        Ok((artifacts, summary))
    }

    fn analyze(&mut self) -> Result<StageResult> {
        let data = self.load_data()?;
        let train = BreachStore::open(&self.path(paths::BREACH_TRAIN))?.load()?;
        let test = BreachStore::open(&self.path(paths::BREACH_TEST))?.load()?;
        let rows = crate::metrics::read_rows_csv(&self.path(paths::INSTANCES))?;
        let factors = analyze::factor_table(&data, &train, &test)?;
        let written = analyze::write_exports(&self.path(paths::ANALYSIS), &factors, &rows)?;
        let summary = BTreeMap::from([("exports".into(), json!(written.len()))]);
        Ok((vec![paths::ANALYSIS.into()], summary))
    }

    fn report(&mut self) -> Result<StageResult> {
        let reports: BTreeMap<String, MetricsReport> = io::read_json(&self.path(paths::AGGREGATES))?;
        let acc: AccuracySummary = io::read_json(&self.path(paths::ACCURACY))?;
        let order: Vec<String> = self
            .cfg
            .runs()
            .iter()
            .map(RunKey::id)
            .chain(
                self.cfg
                    .surrogate
                    .enabled
                    .then(|| [SURROGATE_RS_CAM.into(), SURROGATE_S_CAM.into()])
                    .into_iter()
                    .flatten(),
            )
            .filter(|id| reports.contains_key(id))
            .collect();
        let written = report::render(&self.dir, &self.cfg, &order, &reports, &acc)?;
        let summary = BTreeMap::from([("files".into(), json!(written.len()))]);
        Ok((vec![paths::FIGURES.into(), paths::REPORT.into()], summary))
    }
}

/// Trains on `indices` with every tenth one held out; returns the final
/// held-out accuracy (training accuracy when nothing is held out).
fn fit_classifier(
    spec: ModelSpec,
    data: &LabeledImageCollection,
    indices: &[usize],
    cfg: &TrainingConfig,
    mode: Parallelism,
) -> Result<(Classifier, TrainingLog, f64)> {
    let (tr, va) = validation_split(indices.len());
    let tr: Vec<usize> = tr.into_iter().map(|i| indices[i]).collect();
    let va: Vec<usize> = va.into_iter().map(|i| indices[i]).collect();
    let heldout = (!va.is_empty()).then(|| data.subset(&va));
    let model = Classifier::build(spec, cfg.seed)?;
    let (model, log) = train_classifier(model, &data.subset(&tr), heldout.as_ref(), cfg, mode)?;
    let check = if va.is_empty() { &tr } else { &va };
    let imgs: Vec<&ImageTensor> = check.iter().map(|&i| &data.images[i]).collect();
    let labels: Vec<usize> = check.iter().map(|&i| data.labels[i]).collect();
    let acc = model.accuracy(&imgs, &labels, mode)?;
    Ok((model, log, acc))
}

/// Black-box queries: the target's prediction and each requested explanation
/// of its predicted class.
pub fn query_target(
    target: &Classifier,
    data: &LabeledImageCollection,
    indices: &[usize],
    kinds: &[(ExplanationKind, ExplanationShape)],
    run_id: &str,
    mode: Parallelism,
) -> Result<Vec<BreachedTuple>> {
    let imgs: Vec<&ImageTensor> = indices.iter().map(|&i| &data.images[i]).collect();
    let preds = target.predict_batch(&imgs, mode)?;
    let classes: Vec<usize> = preds.iter().map(|p| p.argmax()).collect();
    let mut per_kind = kinds
        .iter()
        .map(|&(k, _)| Ok(explain(target, &imgs, &classes, k, mode)?.into_iter()))
        .collect::<Result<Vec<_>>>()?;
    Ok(preds
        .into_iter()
        .zip(indices)
        .map(|(p, &i)| BreachedTuple {
            prediction: p,
            explanations: per_kind.iter_mut().map(|it| it.next().expect("one per image")).collect(),
            source_index: Some(i),
            run_id: run_id.into(),
        })
        .collect())
}

pub(crate) fn source_indices(tuples: &[BreachedTuple]) -> Result<Vec<usize>> {
    tuples
        .iter()
        .map(|t| t.source_index.ok_or_else(|| Error::Provenance("breached tuple without a source index".into())))
        .collect()
}

fn write_images(path: &Path, shape: &[usize], images: &[&ImageTensor]) -> Result<()> {
    let flat: Vec<f32> = images.iter().flat_map(|im| im.pixels().iter().copied()).collect();
    io::write_npy(path, shape, &flat)
}

struct EvalContext<'a> {
    eval: &'a Classifier,
    instances: &'a [usize],
    originals: &'a [&'a ImageTensor],
    labels: &'a [usize],
    z: Vec<Vec<f32>>,
    sigma: f64,
    mode: Parallelism,
}

impl EvalContext<'_> {
    /// Per-instance rows in instance order, metrics in [`METRICS`] order.
    fn rows(&self, run_id: &str, recon: &[ImageTensor]) -> Result<Vec<MetricRow>> {
        if recon.len() != self.instances.len() {
            return Err(Error::Shape(format!(
                "{} reconstructions for {} instances",
                recon.len(),
                self.instances.len()
            )));
        }
        let refs: Vec<&ImageTensor> = recon.iter().collect();
        let predicted = self.eval.classify(&refs, self.mode)?;
        let z_r = self.eval.embed_batch(&refs, self.mode)?;
        let pos: Vec<usize> = (0..recon.len()).collect();
        let parts = map_chunks(self.mode, &pos, METRIC_CHUNK, |chunk| -> Result<Vec<[f64; 6]>> {
            chunk
                .iter()
                .map(|&j| {
                    let m = mse(self.originals[j], &recon[j])?;
                    Ok([
                        m,
                        1.0 - m,
                        ssim(self.originals[j], &recon[j], self.sigma)?,
                        psnr_from_mse(m),
                        f64::from(u8::from(predicted[j] == self.labels[j])),
                        embedding_similarity_from(&self.z[j], &z_r[j])?,
                    ])
                })
                .collect()
        });
        let mut rows = Vec::with_capacity(recon.len() * METRICS.len());
        let mut j = 0;
        for p in parts {
            for vals in p? {
                for (name, v) in METRICS.iter().zip(vals) {
                    rows.push(MetricRow {
                        run_id: run_id.into(),
                        instance: self.instances[j],
                        metric: (*name).into(),
                        value: Some(v),
                    });
                }
                j += 1;
            }
        }
        Ok(rows)
    }
}
