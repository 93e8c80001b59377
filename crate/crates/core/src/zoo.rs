//! Classifiers used as target, surrogate target and attack-evaluation model.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xaimi_nn::loss::{softmax, softmax_cross_entropy};
use xaimi_nn::network::{conv, linear};
use xaimi_nn::parallel::map_chunks;
use xaimi_nn::train::batch_gradient;
use xaimi_nn::{Adam, AdamConfig, Layer, MaxPool2d, NnError, Parallelism, Params, Real, Sequential, Tensor};

use crate::checkpoint;
use crate::data::LabeledImageCollection;
use crate::error::{Error, Result};
use crate::image::{to_batch, ImageTensor};
use crate::spec::{Activation, FeatureShape, LayerKind, ModelSpec};

/// Optimizer and schedule settings shared by every trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Samples per gradient work item; fixes the reduction order so results
    /// do not depend on the thread count.
    #[serde(default = "defaults::chunk_size")]
    pub chunk_size: usize,
}

mod defaults {
    pub fn learning_rate() -> f64 {
        1e-4
    }
    pub fn beta1() -> f64 {
        0.5
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn epochs() -> usize {
        20
    }
    pub fn chunk_size() -> usize {
        16
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: defaults::learning_rate(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            batch_size: defaults::batch_size(),
            epochs: defaults::epochs(),
            seed: 0,
            chunk_size: defaults::chunk_size(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.batch_size > 0
            && self.chunk_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: 1e-8 }
    }

    /// Shuffled mini-batches for every epoch, drawn from one seeded stream.
    pub(crate) fn epoch_batches(&self, n: usize) -> impl Iterator<Item = Vec<Vec<usize>>> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.epochs).map(move |_| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept, when not the last.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_epoch: Option<usize>,
}

impl TrainingLog {
    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.train_loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Class-confidence vector (softmax output).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionVector {
    pub confidences: Vec<f32>,
}

impl PredictionVector {
    pub fn from_logits(logits: &[f64]) -> Self {
        Self { confidences: softmax(logits).into_iter().map(|p| p as f32).collect() }
    }

    /// Most confident class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.confidences)
    }

    pub fn confidence(&self) -> f32 {
        self.confidences[self.argmax()]
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    spec: ModelSpec,
    net: Sequential<f32>,
}

/// Images per forward pass for batched inference.
pub(crate) const INFER_CHUNK: usize = 64;

impl Classifier {
    /// Builds the network for `spec` with parameters drawn from `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let net = build_network(&spec, seed)?;
        Ok(Self { spec, net })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn network(&self) -> &Sequential<f32> {
        &self.net
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let (h, w, c) = self.spec.input_shape;
        if image.shape() != (h, w, c) {
            return Err(Error::Shape(format!("model expects {h}×{w}×{c}, got {:?}", image.shape())));
        }
        Ok(())
    }

    fn batch(&self, images: &[&ImageTensor]) -> Result<Tensor<f32>> {
        for im in images {
            self.check_image(im)?;
        }
        to_batch(images)
    }

    /// Pre-softmax scores, one row per image.
    pub fn logits(&self, images: &[&ImageTensor], mode: Parallelism) -> Result<Vec<Vec<f64>>> {
        let parts = map_chunks(mode, images, INFER_CHUNK, |chunk| -> Result<Vec<Vec<f64>>> {
            let out = self.net.forward(&self.batch(chunk)?)?;
            let [c, n] = out.dims2()?;
            let d = out.data();
            Ok((0..n).map(|j| (0..c).map(|i| d[i * n + j] as f64).collect()).collect())
        });
        let mut rows = Vec::with_capacity(images.len());
        for p in parts {
            rows.extend(p?);
        }
        Ok(rows)
    }

    pub fn predict(&self, image: &ImageTensor) -> Result<PredictionVector> {
        Ok(self.predict_batch(&[image], Parallelism::Sequential)?.remove(0))
    }

    pub fn predict_batch(&self, images: &[&ImageTensor], mode: Parallelism) -> Result<Vec<PredictionVector>> {
        Ok(self.logits(images, mode)?.iter().map(|z| PredictionVector::from_logits(z)).collect())
    }

    /// Predicted labels (argmax of the logits, lowest index on ties).
    pub fn classify(&self, images: &[&ImageTensor], mode: Parallelism) -> Result<Vec<usize>> {
        Ok(self.logits(images, mode)?.iter().map(|z| argmax(z)).collect())
    }

    pub fn accuracy(&self, images: &[&ImageTensor], labels: &[usize], mode: Parallelism) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::Invalid("accuracy over an empty set".into()));
        }
        let pred = self.classify(images, mode)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / images.len() as f64)
    }

    /// Activation index holding the penultimate fc's output.
    fn embedding_act(&self) -> Result<usize> {
        let n = self.spec.layers.len();
        if n < 2 || self.spec.layers[n - 2].kind != LayerKind::Fc {
            return Err(Error::Invalid(format!("{} has no penultimate fc layer", self.spec.name)));
        }
        Ok(self.net.len() - 1)
    }

    pub fn embed(&self, image: &ImageTensor) -> Result<Vec<f32>> {
        Ok(self.embed_batch(&[image], Parallelism::Sequential)?.remove(0))
    }

    /// Penultimate-layer activations, one row per image.
    pub fn embed_batch(&self, images: &[&ImageTensor], mode: Parallelism) -> Result<Vec<Vec<f32>>> {
        let at = self.embedding_act()?;
        let parts = map_chunks(mode, images, INFER_CHUNK, |chunk| -> Result<Vec<Vec<f32>>> {
            let mut cur = self.batch(chunk)?;
            for (_, l) in &self.net.layers[..at] {
                cur = l.forward(&cur)?.0;
            }
            let [f, n] = cur.dims2()?;
            let d = cur.data();
            Ok((0..n).map(|j| (0..f).map(|i| d[i * n + j]).collect()).collect())
        });
        let mut rows = Vec::with_capacity(images.len());
        for p in parts {
            rows.extend(p?);
        }
        Ok(rows)
    }

    /// Output shape of every spec layer for one forward pass of `image`.
    pub fn layer_shapes(&self, image: &ImageTensor) -> Result<Vec<FeatureShape>> {
        let trace = self.net.forward_trace(&self.batch(&[image])?)?;
        let mut out = Vec::new();
        for (i, (name, _)) in self.net.layers.iter().enumerate() {
            let is_spec_output = self.spec.layers.iter().any(|l| {
                let tail = if l.activation == Activation::Relu { format!("{}.relu", l.name) } else { l.name.clone() };
                &tail == name
            });
            if is_spec_output {
                let t = &trace.acts[i + 1];
                out.push(match t.shape() {
                    [c, _, h, w] => FeatureShape::Spatial { h: *h, w: *w, c: *c },
                    [f, _] => FeatureShape::Flat(*f),
                    s => return Err(Error::Shape(format!("unexpected activation shape {s:?}"))),
                });
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<String> {
        checkpoint::save(dir, "classifier", &self.spec, &self.net)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (header, flat) = checkpoint::load::<ModelSpec>(dir, "classifier")?;
        let mut model = Self::build(header.spec, 0)?;
        checkpoint::restore(&mut model.net, &header.tensors, &flat)?;
        Ok(model)
    }
}

impl Params<f32> for Classifier {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[f32])) {
        self.net.visit_params(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f32])) {
        self.net.visit_params_mut(f)
    }
}

fn build_network(spec: &ModelSpec, seed: u64) -> Result<Sequential<f32>> {
    let shapes = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<(String, Layer<f32>)> = Vec::new();
    let (_, _, mut channels) = spec.input_shape;
    let mut prev = FeatureShape::Spatial { h: spec.input_shape.0, w: spec.input_shape.1, c: channels };
    for (l, &shape) in spec.layers.iter().zip(&shapes) {
        match l.kind {
            LayerKind::Conv => {
                layers.push((l.name.clone(), conv(&mut rng, channels, l.out_channels, l.kernel, l.stride, l.padding)));
                channels = l.out_channels;
            }
            LayerKind::Pool => layers.push((l.name.clone(), Layer::Pool(MaxPool2d { kernel: l.kernel }))),
            LayerKind::Fc => {
                if matches!(prev, FeatureShape::Spatial { .. }) {
                    layers.push(("flatten".into(), Layer::Flatten));
                }
                layers.push((l.name.clone(), linear(&mut rng, prev.size(), l.out_channels)));
            }
            LayerKind::Upsample => unreachable!("rejected by validate"),
        }
        if l.activation == Activation::Relu {
            layers.push((format!("{}.relu", l.name), Layer::Relu));
        }
        prev = shape;
    }
    Ok(Sequential::new(layers))
}

/// Index of the last conv layer in `net`.
pub fn last_conv_index<T: Real>(net: &Sequential<T>) -> Option<usize> {
    net.layers.iter().rposition(|(_, l)| matches!(l, Layer::Conv(_)))
}

/// Mini-batch Adam on summed cross-entropy; loss recorded per epoch.
pub fn train_classifier(
    model: Classifier,
    train: &LabeledImageCollection,
    heldout: Option<&LabeledImageCollection>,
    cfg: &TrainingConfig,
    mode: Parallelism,
) -> Result<(Classifier, TrainingLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if let Some(&bad) = train.labels.iter().find(|&&l| l >= model.class_count()) {
        return Err(Error::LabelOutOfRange {
            record: "training set".into(),
            label: bad,
            class_count: model.class_count(),
        });
    }
    let mut model = model;
    let mut log = TrainingLog::default();
    let n_params = model.num_params();
    let mut adam = Adam::new(cfg.adam(), n_params);
    for (epoch, batches) in cfg.epoch_batches(train.len()).enumerate() {
        let mut total = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let net = &model.net;
            let (loss, mut grad) = batch_gradient(mode, batch, cfg.chunk_size, n_params, |chunk, g| {
                let imgs: Vec<&ImageTensor> = chunk.iter().map(|&i| &train.images[i]).collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
                let x = to_batch(&imgs).map_err(|e| NnError::Shape(e.to_string()))?;
                let trace = net.forward_trace(&x)?;
                let (loss, dl) = softmax_cross_entropy(trace.output(), &labels);
                net.backward(&trace, dl, Some(g), 0, false)?;
                Ok(loss)
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("classifier loss {loss} at epoch {epoch}, step {step}")));
            }
            let scale = 1.0 / batch.len() as f32;
            grad.iter_mut().for_each(|v| *v *= scale);
            adam.step(&mut model.net, &grad);
            total += loss;
        }
        let heldout_accuracy = match heldout {
            Some(h) if !h.is_empty() => {
                let imgs: Vec<&ImageTensor> = h.images.iter().collect();
                Some(model.accuracy(&imgs, &h.labels, mode)?)
            }
            _ => None,
        };
        let rec =
            EpochRecord { epoch, train_loss: total / train.len() as f64, heldout_accuracy, validation_loss: None };
        log::info!("classifier epoch {epoch}: loss {:.5} heldout acc {:?}", rec.train_loss, rec.heldout_accuracy);
        log.epochs.push(rec);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetProfile;

    fn tiny_spec(classes: usize) -> ModelSpec {
        ModelSpec {
            name: "tiny".into(),
            input_shape: (8, 8, 1),
            class_count: classes,
            layers: vec![
                crate::spec::LayerSpec::conv("conv1", 4),
                crate::spec::LayerSpec::pool("pool1"),
                crate::spec::LayerSpec::fc("fc1", 8, Activation::Relu),
                crate::spec::LayerSpec::fc("fc2", classes, Activation::Softmax),
            ],
        }
    }

    fn image(seed: u64, h: usize) -> ImageTensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(h, h, 1, (0..h * h).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn mnist_table_shapes() {
        let m = Classifier::build(ModelSpec::mnist_target(10), 1).unwrap();
        let shapes = m.layer_shapes(&image(0, 32)).unwrap();
        assert_eq!(shapes, ModelSpec::mnist_target(10).validate().unwrap());
        assert_eq!(m.embed(&image(0, 32)).unwrap().len(), 512);
    }

    #[test]
    fn build_is_deterministic() {
        let a = Classifier::build(tiny_spec(3), 9).unwrap();
        let b = Classifier::build(tiny_spec(3), 9).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        let c = Classifier::build(tiny_spec(3), 10).unwrap();
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn prediction_is_a_distribution() {
        let m = Classifier::build(tiny_spec(4), 2).unwrap();
        let x = image(1, 8);
        let p = m.predict(&x).unwrap();
        let s: f32 = p.confidences.iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
        assert!(p.confidences.iter().all(|&v| v >= 0.0));
        assert_eq!(p, m.predict(&x).unwrap());
        assert!(m.predict(&image(1, 9)).is_err());
    }

    #[test]
    fn zero_epochs_is_identity() {
        let m = Classifier::build(tiny_spec(2), 3).unwrap();
        let p = DatasetProfile { class_count: 2, image_size: (8, 8), ..DatasetProfile::mnist() };
        let data = LabeledImageCollection::new(p, vec![image(1, 8), image(2, 8)], vec![0, 1]).unwrap();
        let cfg = TrainingConfig { epochs: 0, ..Default::default() };
        let (trained, log) = train_classifier(m.clone(), &data, None, &cfg, Parallelism::Sequential).unwrap();
        assert_eq!(trained, m);
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn single_class_training_converges() {
        let m = Classifier::build(tiny_spec(2), 3).unwrap();
        let p = DatasetProfile { class_count: 2, image_size: (8, 8), ..DatasetProfile::mnist() };
        let imgs: Vec<_> = (0..16).map(|i| image(i, 8)).collect();
        let data = LabeledImageCollection::new(p, imgs, vec![1; 16]).unwrap();
        let cfg = TrainingConfig { epochs: 30, learning_rate: 1e-2, batch_size: 8, ..Default::default() };
        let (trained, log) = train_classifier(m, &data, Some(&data), &cfg, Parallelism::Sequential).unwrap();
        assert!(log.last_loss().unwrap() < 0.01);
        assert!(log.last_loss().unwrap() < log.first_loss().unwrap());
        assert_eq!(log.epochs.last().unwrap().heldout_accuracy, Some(1.0));
        let refs: Vec<_> = data.images.iter().collect();
        assert_eq!(trained.accuracy(&refs, &data.labels, Parallelism::Sequential).unwrap(), 1.0);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let m = Classifier::build(tiny_spec(3), 5).unwrap();
        m.save(dir.path()).unwrap();
        let back = Classifier::load(dir.path()).unwrap();
        let a: Vec<u32> = m.flat_params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.flat_params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.spec(), m.spec());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }
}
