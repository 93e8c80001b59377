//! Attacks on targets that expose no explanation: a surrogate classifier
//! trained on attacker data supplies CAMs (s-CAM), an explanation inverter
//! learns to predict them from the target's prediction alone (rs-CAM), and
//! an image inverter consumes the predicted CAM.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xaimi_nn::Parallelism;

use crate::data::{DatasetProfile, LabelKind, LabeledImageCollection, SplitPlan};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::inversion::{train_inversion, BreachedTuple, InversionModel};
use crate::io;
use crate::metrics::explanation_typicalness;
use crate::spec::{ExplanationShape, InversionMethod, InversionSpec, ModelSpec};
use crate::xai::{explain, normalize_min_max, Explanation, ExplanationKind, ExplanationMap};
use crate::zoo::{train_classifier, Classifier, PredictionVector, TrainingConfig, TrainingLog};

/// Which CAM the image inverter sees during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateMode {
    /// Reconstructed surrogate CAMs, matching what the attack feeds it.
    #[default]
    TrainOnRsCam,
    /// Surrogate CAMs computed directly on the attacker's images.
    TrainOnSCam,
}

impl SurrogateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SurrogateMode::TrainOnRsCam => "train_on_rs_cam",
            SurrogateMode::TrainOnSCam => "train_on_s_cam",
        }
    }
}

/// Fails unless every index belongs to the attack split.
pub fn assert_attack_only(plan: &SplitPlan, indices: &[usize]) -> Result<()> {
    let allowed: HashSet<usize> = plan.attack_indices().into_iter().collect();
    match indices.iter().find(|i| !allowed.contains(i)) {
        Some(i) => Err(Error::Provenance(format!("index {i} is outside the attack split"))),
        None => Ok(()),
    }
}

/// Trains a classifier with the target's architecture on attacker data only.
pub fn train_surrogate_target(
    spec: ModelSpec,
    data: &LabeledImageCollection,
    indices: &[usize],
    plan: &SplitPlan,
    cfg: &TrainingConfig,
    mode: Parallelism,
) -> Result<(Classifier, TrainingLog)> {
    assert_attack_only(plan, indices)?;
    let model = Classifier::build(spec, cfg.seed)?;
    train_classifier(model, &data.subset(indices), None, cfg, mode)
}

/// Surrogate Grad-CAMs of its own predicted class.
pub fn surrogate_cams(surrogate: &Classifier, images: &[&ImageTensor], mode: Parallelism) -> Result<Vec<Explanation>> {
    let classes = surrogate.classify(images, mode)?;
    explain(surrogate, images, &classes, ExplanationKind::GradCam, mode)
}

fn cam_profile(shape: ExplanationShape, class_count: usize) -> DatasetProfile {
    DatasetProfile {
        name: "cam".into(),
        image_size: (shape.height, shape.width),
        channels: 1,
        class_count,
        label_kind: LabelKind::Target,
    }
}

/// Prediction-only decoder whose output is a CAM-sized single-channel map.
pub fn build_explanation_inverter(
    cam_shape: ExplanationShape,
    class_count: usize,
    divisor: usize,
    seed: u64,
) -> Result<InversionModel> {
    if cam_shape.depth != 1 {
        return Err(Error::Shape(format!(
            "explanation inverter reconstructs single maps, not depth {}",
            cam_shape.depth
        )));
    }
    let spec =
        InversionSpec::build(InversionMethod::PredictionOnly, &cam_profile(cam_shape, class_count), None, divisor)?;
    InversionModel::build(spec, None, seed)
}

/// Normalized CAM as a one-channel image (the explanation inverter's target).
fn cam_target(e: &Explanation) -> Result<ImageTensor> {
    let s = e.shape();
    if s.depth != 1 {
        return Err(Error::Shape("s-CAM must be a single map".into()));
    }
    ImageTensor::new(s.height, s.width, 1, normalize_min_max(e.values()))
}

/// Fits `M_e` on (target prediction, surrogate CAM) pairs from the same
/// attacker images.
pub fn train_explanation_inverter(
    model: InversionModel,
    predictions: &[PredictionVector],
    s_cams: &[Explanation],
    cfg: &TrainingConfig,
    mode: Parallelism,
) -> Result<(InversionModel, TrainingLog)> {
    if predictions.len() != s_cams.len() {
        return Err(Error::Shape(format!("{} predictions vs {} s-CAMs", predictions.len(), s_cams.len())));
    }
    let targets = s_cams.iter().map(cam_target).collect::<Result<Vec<_>>>()?;
    let tuples: Vec<BreachedTuple> = predictions
        .iter()
        .enumerate()
        .map(|(i, p)| BreachedTuple {
            prediction: p.clone(),
            explanations: Vec::new(),
            source_index: Some(i),
            run_id: "explanation_inverter".into(),
        })
        .collect();
    train_inversion(model, &tuples, &targets, cfg, mode)
}

fn rs_cam_from(out: ImageTensor, prediction: &PredictionVector) -> Explanation {
    Explanation::Map(ExplanationMap {
        kind: ExplanationKind::GradCam,
        explained_class: prediction.argmax(),
        source_layer: Some("rs_cam".into()),
        height: out.height(),
        width: out.width(),
        normalized: false,
        values: out.pixels().to_vec(),
    })
}

/// rs-CAMs for a batch of target predictions; non-negative by construction.
pub fn reconstruct_explanations(
    inverter: &InversionModel,
    predictions: &[PredictionVector],
    mode: Parallelism,
) -> Result<Vec<Explanation>> {
    let tuples: Vec<BreachedTuple> = predictions
        .iter()
        .map(|p| BreachedTuple {
            prediction: p.clone(),
            explanations: Vec::new(),
            source_index: None,
            run_id: String::new(),
        })
        .collect();
    let refs: Vec<&BreachedTuple> = tuples.iter().collect();
    let out = inverter.invert_batch(&refs, mode)?;
    Ok(out.into_iter().zip(predictions).map(|(o, p)| rs_cam_from(o, p)).collect())
}

/// Quality of rs-CAMs against the s-CAMs they imitate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationInverterReport {
    pub mse: f64,
    /// MSE of an all-zero map, the trivial baseline.
    pub zero_map_mse: f64,
    /// Mean PCC of each rs-CAM with its own s-CAM.
    pub matched_pcc: f64,
    /// Mean PCC with the s-CAM of another instance (shifted by n/2).
    pub mismatched_pcc: f64,
    pub n: usize,
}

pub fn evaluate_explanation_inverter(
    rs_cams: &[Explanation],
    s_cams: &[Explanation],
) -> Result<ExplanationInverterReport> {
    let n = rs_cams.len();
    if n != s_cams.len() || n < 2 {
        return Err(Error::Shape(format!("{} rs-CAMs vs {} s-CAMs", n, s_cams.len())));
    }
    let targets: Vec<Vec<f32>> = s_cams.iter().map(|e| normalize_min_max(e.values())).collect();
    let (mut mse, mut zero) = (0.0, 0.0);
    for (r, t) in rs_cams.iter().zip(&targets) {
        let m = t.len() as f64;
        mse += r.values().iter().zip(t).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / m;
        zero += t.iter().map(|&b| (b as f64).powi(2)).sum::<f64>() / m;
    }
    let mean_pcc = |shift: usize| -> Result<f64> {
        let mut vals = Vec::new();
        for (i, r) in rs_cams.iter().enumerate() {
            if let Some(p) = explanation_typicalness(r.values(), &targets[(i + shift) % n])? {
                vals.push(p);
            }
        }
        Ok(if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 })
    };
    Ok(ExplanationInverterReport {
        mse: mse / n as f64,
        zero_map_mse: zero / n as f64,
        matched_pcc: mean_pcc(0)?,
        mismatched_pcc: mean_pcc(n / 2)?,
        n,
    })
}

/// Staged construction of a [`SurrogateBundle`]. The stages must run in
/// order: surrogate target, explanation inverter, image inverter.
#[derive(Default)]
pub struct SurrogateTraining {
    pub mode: SurrogateMode,
    surrogate: Option<Classifier>,
    explanation_inverter: Option<InversionModel>,
    image_inverter: Option<InversionModel>,
}

fn order_error(stage: &str, needs: &str) -> Error {
    Error::Config(format!("surrogate stage `{stage}` requires `{needs}` to be trained first"))
}

impl SurrogateTraining {
    pub fn new(mode: SurrogateMode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn with_surrogate(mut self, surrogate: Classifier) -> Self {
        self.surrogate = Some(surrogate);
        self
    }

    pub fn surrogate(&self) -> Option<&Classifier> {
        self.surrogate.as_ref()
    }

    pub fn explanation_inverter(&self) -> Option<&InversionModel> {
        self.explanation_inverter.as_ref()
    }

    /// Trains the surrogate on attack-split `indices`.
    pub fn train_surrogate(
        mut self,
        spec: ModelSpec,
        data: &LabeledImageCollection,
        indices: &[usize],
        plan: &SplitPlan,
        cfg: &TrainingConfig,
        mode: Parallelism,
    ) -> Result<(Self, TrainingLog)> {
        let (m, log) = train_surrogate_target(spec, data, indices, plan, cfg, mode)?;
        self.surrogate = Some(m);
        Ok((self, log))
    }

    /// Fits the explanation inverter on target predictions for attacker
    /// images and the surrogate's CAMs of those images.
    #[allow(clippy::too_many_arguments)]
    pub fn train_explanation_inverter(
        mut self,
        images: &[&ImageTensor],
        target_predictions: &[PredictionVector],
        divisor: usize,
        cfg: &TrainingConfig,
        mode: Parallelism,
    ) -> Result<(Self, TrainingLog)> {
        let surrogate =
            self.surrogate.as_ref().ok_or_else(|| order_error("explanation_inverter", "surrogate_target"))?;
        let shape = ExplanationKind::GradCam.shape_for(surrogate)?;
        let s_cams = surrogate_cams(surrogate, images, mode)?;
        let model = build_explanation_inverter(shape, surrogate.class_count(), divisor, cfg.seed)?;
        let (m, log) = train_explanation_inverter(model, target_predictions, &s_cams, cfg, mode)?;
        self.explanation_inverter = Some(m);
        Ok((self, log))
    }

    /// Trains the image inverter on tuples carrying the CAM chosen by
    /// `self.mode`. `indices[i]` is the source image of `target_predictions[i]`.
    #[allow(clippy::too_many_arguments)]
    pub fn train_image_inverter(
        mut self,
        method: InversionMethod,
        profile: &DatasetProfile,
        data: &LabeledImageCollection,
        indices: &[usize],
        plan: &SplitPlan,
        target_predictions: &[PredictionVector],
        divisor: usize,
        cfg: &TrainingConfig,
        mode: Parallelism,
    ) -> Result<(Self, TrainingLog)> {
        assert_attack_only(plan, indices)?;
        let surrogate = self.surrogate.as_ref().ok_or_else(|| order_error("image_inverter", "surrogate_target"))?;
        let cams = match self.mode {
            SurrogateMode::TrainOnRsCam => {
                let inv = self
                    .explanation_inverter
                    .as_ref()
                    .ok_or_else(|| order_error("image_inverter", "explanation_inverter"))?;
                reconstruct_explanations(inv, target_predictions, mode)?
            }
            SurrogateMode::TrainOnSCam => {
                let images: Vec<&ImageTensor> = indices.iter().map(|&i| &data.images[i]).collect();
                surrogate_cams(surrogate, &images, mode)?
            }
        };
        let shape = ExplanationKind::GradCam.shape_for(surrogate)?;
        let tuples = surrogate_tuples(target_predictions, cams, indices, "surrogate")?;
        let spec = InversionSpec::build(method, profile, method.needs_explanation().then_some(shape), divisor)?;
        let model =
            InversionModel::build(spec, method.needs_explanation().then_some(ExplanationKind::GradCam), cfg.seed)?;
        let (m, log) = train_inversion(model, &tuples, &data.images, cfg, mode)?;
        self.image_inverter = Some(m);
        Ok((self, log))
    }

    pub fn finish(self) -> Result<SurrogateBundle> {
        let surrogate = self.surrogate.ok_or_else(|| order_error("finish", "surrogate_target"))?;
        let explanation_inverter =
            self.explanation_inverter.ok_or_else(|| order_error("finish", "explanation_inverter"))?;
        let image_inverter = self.image_inverter.ok_or_else(|| order_error("finish", "image_inverter"))?;
        SurrogateBundle::new(surrogate, explanation_inverter, image_inverter, self.mode)
    }
}

/// Pairs predictions with CAMs as breached tuples for `indices`.
pub fn surrogate_tuples(
    predictions: &[PredictionVector],
    cams: Vec<Explanation>,
    indices: &[usize],
    run_id: &str,
) -> Result<Vec<BreachedTuple>> {
    if predictions.len() != cams.len() || cams.len() != indices.len() {
        return Err(Error::Shape("predictions, CAMs and indices differ in length".into()));
    }
    Ok(predictions
        .iter()
        .zip(cams)
        .zip(indices)
        .map(|((p, e), &i)| BreachedTuple {
            prediction: p.clone(),
            explanations: vec![e],
            source_index: Some(i),
            run_id: run_id.into(),
        })
        .collect())
}

/// Surrogate `M_t^a`, explanation inverter `M_e^a` and image inverter `M_i^a`.
pub struct SurrogateBundle {
    pub surrogate: Classifier,
    pub explanation_inverter: InversionModel,
    pub image_inverter: InversionModel,
    pub mode: SurrogateMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: String,
    pub mode: SurrogateMode,
    pub explanation_kind: ExplanationKind,
    pub cam_shape: ExplanationShape,
    pub surrogate_sha256: String,
    pub explanation_inverter_sha256: String,
    pub image_inverter_sha256: String,
    pub split_checksum: String,
}

pub const BUNDLE_FORMAT: &str = "xaimi-surrogate/1";

impl SurrogateBundle {
    pub fn new(
        surrogate: Classifier,
        explanation_inverter: InversionModel,
        image_inverter: InversionModel,
        mode: SurrogateMode,
    ) -> Result<Self> {
        let shape = ExplanationKind::GradCam.shape_for(&surrogate)?;
        let (h, w, c) = explanation_inverter.spec().output_shape;
        if (c, h, w) != (1, shape.height, shape.width) {
            return Err(Error::Shape(format!("explanation inverter emits {h}×{w}×{c}, surrogate CAM is {shape:?}")));
        }
        if image_inverter.spec().explanation != Some(shape)
            || image_inverter.explanation_kind() != Some(ExplanationKind::GradCam)
        {
            return Err(Error::Shape(format!(
                "image inverter expects {:?}, surrogate CAM is {shape:?}",
                image_inverter.spec().explanation
            )));
        }
        Ok(Self { surrogate, explanation_inverter, image_inverter, mode })
    }

    pub fn cam_shape(&self) -> ExplanationShape {
        self.image_inverter.spec().explanation.expect("validated")
    }

    pub fn reconstruct_surrogate_explanation(&self, prediction: &PredictionVector) -> Result<ExplanationMap> {
        match reconstruct_explanations(
            &self.explanation_inverter,
            std::slice::from_ref(prediction),
            Parallelism::Sequential,
        )?
        .remove(0)
        {
            Explanation::Map(m) => Ok(m),
            Explanation::Stack(_) => unreachable!("rs-CAMs are maps"),
        }
    }

    pub fn attack_nonexplainable(&self, prediction: &PredictionVector) -> Result<ImageTensor> {
        Ok(self.attack_batch(std::slice::from_ref(prediction), Parallelism::Sequential)?.remove(0))
    }

    pub fn attack_batch(&self, predictions: &[PredictionVector], mode: Parallelism) -> Result<Vec<ImageTensor>> {
        let cams = reconstruct_explanations(&self.explanation_inverter, predictions, mode)?;
        let tuples: Vec<BreachedTuple> = predictions
            .iter()
            .zip(cams)
            .map(|(p, e)| BreachedTuple {
                prediction: p.clone(),
                explanations: vec![e],
                source_index: None,
                run_id: String::new(),
            })
            .collect();
        let refs: Vec<&BreachedTuple> = tuples.iter().collect();
        self.image_inverter.invert_batch(&refs, mode)
    }

    /// Three checkpoints plus `bundle.json`.
    pub fn save(&self, dir: &Path, split_checksum: &str) -> Result<BundleManifest> {
        let manifest = BundleManifest {
            format: BUNDLE_FORMAT.into(),
            mode: self.mode,
            explanation_kind: ExplanationKind::GradCam,
            cam_shape: self.cam_shape(),
            surrogate_sha256: self.surrogate.save(&dir.join("surrogate"))?,
            explanation_inverter_sha256: self.explanation_inverter.save(&dir.join("explanation_inverter"))?,
            image_inverter_sha256: self.image_inverter.save(&dir.join("image_inverter"))?,
            split_checksum: split_checksum.into(),
        };
        io::write_json(&dir.join("bundle.json"), &manifest)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<(Self, BundleManifest)> {
        let manifest: BundleManifest = io::read_json(&dir.join("bundle.json"))?;
        if manifest.format != BUNDLE_FORMAT {
            return Err(Error::Load { path: dir.into(), reason: format!("unknown format {}", manifest.format) });
        }
        let bundle = Self::new(
            Classifier::load(&dir.join("surrogate"))?,
            InversionModel::load(&dir.join("explanation_inverter"))?,
            InversionModel::load(&dir.join("image_inverter"))?,
            manifest.mode,
        )?;
        Ok((bundle, manifest))
    }
}
