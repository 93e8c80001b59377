//! Inversion models that reconstruct a private input from what a target
//! reveals: its prediction vector and, optionally, an explanation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xaimi_nn::loss::squared_error;
use xaimi_nn::network::{conv, linear, upsample};
use xaimi_nn::parallel::map_chunks;
use xaimi_nn::train::batch_gradient;
use xaimi_nn::{Adam, Layer, MaxPool2d, NnError, Parallelism, Params, Real, Sequential, Tensor, Trace};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::image::{to_batch, ImageTensor};
use crate::io;
use crate::spec::{Activation, ExplanationShape, InversionSpec, LayerKind};
use crate::xai::{Explanation, ExplanationKind, ExplanationMap, ExplanationStack};
use crate::zoo::{EpochRecord, PredictionVector, TrainingConfig, TrainingLog, INFER_CHUNK};

/// What the attacker observes for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreachedTuple {
    pub prediction: PredictionVector,
    pub explanations: Vec<Explanation>,
    /// Index of the queried image in the source collection. Used to pair
    /// training targets and by metrics; never read by [`InversionModel`].
    pub source_index: Option<usize>,
    pub run_id: String,
}

impl BreachedTuple {
    pub fn explanation(&self, kind: ExplanationKind) -> Option<&Explanation> {
        self.explanations.iter().find(|e| e.kind() == kind)
    }
}

struct Stage<T> {
    up: Sequential<T>,
    conv: Sequential<T>,
    /// Index into the encoder taps concatenated into `conv`'s input.
    skip: Option<usize>,
}

impl<T: Real> Stage<T> {
    fn cast<U: Real>(&self) -> Stage<U> {
        Stage { up: self.up.cast(), conv: self.conv.cast(), skip: self.skip }
    }
}

/// Network part of an inversion model, generic over the scalar type.
pub struct InversionNet<T> {
    encoder: Option<Sequential<T>>,
    /// Encoder activation indices read by bypass links, with their layer names.
    taps: Vec<(String, usize)>,
    fusion: Sequential<T>,
    stages: Vec<Stage<T>>,
    flatten: bool,
    class_count: usize,
}

struct ForwardState<T> {
    enc: Option<Trace<T>>,
    fusion: Trace<T>,
    stages: Vec<(Trace<T>, Trace<T>)>,
    up_channels: Vec<usize>,
}

impl<T: Real> InversionNet<T> {
    fn build(spec: &InversionSpec, seed: u64) -> Result<Self> {
        let (enc_shapes, _, _) = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = None;
        let mut taps = Vec::new();
        if let Some(e) = spec.explanation.filter(|_| spec.method.encodes()) {
            let mut layers: Vec<(String, Layer<T>)> = Vec::new();
            let mut ch = e.depth;
            let mut flat = e.len();
            for (l, shape) in spec.encoder.iter().zip(&enc_shapes) {
                match l.kind {
                    LayerKind::Conv => {
                        layers
                            .push((l.name.clone(), conv(&mut rng, ch, l.out_channels, l.kernel, l.stride, l.padding)));
                        layers.push((format!("{}.relu", l.name), Layer::Relu));
                        taps.push((l.name.clone(), layers.len()));
                        ch = l.out_channels;
                    }
                    LayerKind::Pool => layers.push((l.name.clone(), Layer::Pool(MaxPool2d { kernel: l.kernel }))),
                    LayerKind::Fc => {
                        layers.push(("enc_flatten".into(), Layer::Flatten));
                        layers.push((l.name.clone(), linear(&mut rng, flat, l.out_channels)));
                        layers.push((format!("{}.relu", l.name), Layer::Relu));
                    }
                    LayerKind::Upsample => unreachable!("rejected by validate"),
                }
                flat = shape.size();
            }
            encoder = Some(Sequential::new(layers));
        }
        let mut fusion =
            vec![(spec.fusion.name.clone(), linear(&mut rng, spec.fusion_input_width(), spec.fusion.out_channels))];
        if spec.fusion.activation == Activation::Relu {
            fusion.push((format!("{}.relu", spec.fusion.name), Layer::Relu));
        }
        fusion.push(("to_spatial".into(), Layer::ToSpatial));
        let fusion = Sequential::new(fusion);
        let mut stages = Vec::new();
        let mut ch = spec.fusion.out_channels;
        for pair in spec.decoder.chunks(2) {
            let [up_spec, conv_spec] = pair else {
                return Err(Error::Spec {
                    layer: pair[0].name.clone(),
                    reason: "decoder layers come in upsample/conv pairs".into(),
                });
            };
            if up_spec.kind != LayerKind::Upsample || conv_spec.kind != LayerKind::Conv {
                return Err(Error::Spec {
                    layer: up_spec.name.clone(),
                    reason: "expected upsample followed by conv".into(),
                });
            }
            let mut up_layers = vec![(
                up_spec.name.clone(),
                upsample(&mut rng, ch, up_spec.out_channels, up_spec.kernel, up_spec.stride, up_spec.padding),
            )];
            if up_spec.activation == Activation::Relu {
                up_layers.push((format!("{}.relu", up_spec.name), Layer::Relu));
            }
            let up = Sequential::new(up_layers);
            let skip = conv_spec
                .bypass_link
                .as_ref()
                .map(|link| taps.iter().position(|(n, _)| n == link).expect("validated bypass link"));
            let skip_ch = skip
                .map(|s| {
                    let pos = spec.encoder.iter().position(|l| l.name == taps[s].0).expect("tap exists");
                    spec.encoder[pos].out_channels
                })
                .unwrap_or(0);
            let mut conv_layers = vec![(
                conv_spec.name.clone(),
                conv(
                    &mut rng,
                    up_spec.out_channels + skip_ch,
                    conv_spec.out_channels,
                    conv_spec.kernel,
                    conv_spec.stride,
                    conv_spec.padding,
                ),
            )];
            if conv_spec.activation == Activation::Relu {
                conv_layers.push((format!("{}.relu", conv_spec.name), Layer::Relu));
            }
            stages.push(Stage { up, conv: Sequential::new(conv_layers), skip });
            ch = conv_spec.out_channels;
        }
        Ok(Self { encoder, taps, fusion, stages, flatten: spec.method.flattens(), class_count: spec.class_count })
    }

    pub fn cast<U: Real>(&self) -> InversionNet<U> {
        InversionNet {
            encoder: self.encoder.as_ref().map(Sequential::cast),
            taps: self.taps.clone(),
            fusion: self.fusion.cast(),
            stages: self.stages.iter().map(Stage::cast).collect(),
            flatten: self.flatten,
            class_count: self.class_count,
        }
    }

    fn forward_state(&self, y: &Tensor<T>, e: Option<&Tensor<T>>) -> Result<ForwardState<T>> {
        let enc = match (&self.encoder, e) {
            (Some(enc), Some(e)) => Some(enc.forward_trace(e)?),
            (Some(_), None) => return Err(Error::Invalid("model requires an explanation input".into())),
            _ => None,
        };
        let mut parts: Vec<&Tensor<T>> = vec![y];
        if let Some(t) = &enc {
            parts.push(t.output());
        }
        let flat;
        if self.flatten {
            flat = e.ok_or_else(|| Error::Invalid("model requires an explanation input".into()))?.flatten_spatial()?;
            parts.push(&flat);
        }
        let fusion = self.fusion.forward_trace(&Tensor::concat_leading(&parts)?)?;
        let mut cur = fusion.output().clone();
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut up_channels = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let up = st.up.forward_trace(&cur)?;
            let u = up.output();
            up_channels.push(u.shape()[0]);
            let input = match st.skip {
                Some(s) => {
                    let enc = enc.as_ref().expect("skip implies encoder");
                    Tensor::concat_leading(&[u, &enc.acts[self.taps[s].1]])?
                }
                None => u.clone(),
            };
            let c = st.conv.forward_trace(&input)?;
            cur = c.output().clone();
            stages.push((up, c));
        }
        Ok(ForwardState { enc, fusion, stages, up_channels })
    }

    /// Unclamped reconstruction `[C, N, H, W]`.
    pub fn forward(&self, y: &Tensor<T>, e: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let st = self.forward_state(y, e)?;
        Ok(match st.stages.last() {
            Some((_, c)) => c.output().clone(),
            None => st.fusion.output().clone(),
        })
    }

    /// Accumulates the parameter gradient of `Σ grad_out · output` into `grad`.
    fn backward(&self, state: &ForwardState<T>, grad_out: Tensor<T>, grad: &mut [T]) -> Result<()> {
        let (enc_slot, rest) = grad.split_at_mut(self.encoder.as_ref().map_or(0, |e| e.num_params()));
        let (fusion_slot, mut rest) = rest.split_at_mut(self.fusion.num_params());
        let mut stage_slots = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let (up, r) = rest.split_at_mut(st.up.num_params());
            let (cv, r) = r.split_at_mut(st.conv.num_params());
            stage_slots.push((up, cv));
            rest = r;
        }

        let mut tap_grads: Vec<Option<Tensor<T>>> = vec![None; self.taps.len()];
        let mut g = grad_out;
        for (i, (st, (up_slot, conv_slot))) in self.stages.iter().zip(stage_slots).enumerate().rev() {
            let (up_trace, conv_trace) = &state.stages[i];
            let d_in = st.conv.backward(conv_trace, g, Some(conv_slot), 0, true)?.expect("input grad");
            let d_up = match st.skip {
                Some(s) => {
                    let u = state.up_channels[i];
                    let mut parts = d_in.split_leading(&[u, d_in.shape()[0] - u])?;
                    let skip_g = parts.pop().expect("two parts");
                    match &mut tap_grads[s] {
                        Some(acc) => acc.add_assign(&skip_g),
                        slot @ None => *slot = Some(skip_g),
                    }
                    parts.pop().expect("two parts")
                }
                None => d_in,
            };
            g = st.up.backward(up_trace, d_up, Some(up_slot), 0, true)?.expect("input grad");
        }
        let d_fusion = self.fusion.backward(&state.fusion, g, Some(fusion_slot), 0, self.encoder.is_some())?;
        if let (Some(enc), Some(enc_trace), Some(d_fusion)) = (&self.encoder, &state.enc, d_fusion) {
            let total = d_fusion.shape()[0];
            let emb = enc_trace.output().shape()[0];
            let parts = d_fusion.split_leading(&[self.class_count, emb, total - self.class_count - emb])?;
            let taps: Vec<(usize, &Tensor<T>)> =
                self.taps.iter().zip(&tap_grads).filter_map(|((_, at), g)| g.as_ref().map(|g| (*at, g))).collect();
            enc.backward_with_taps(enc_trace, parts[1].clone(), &taps, Some(enc_slot), 0, false)?;
        }
        Ok(())
    }
}

impl<T: Real> Params<T> for InversionNet<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[T])) {
        if let Some(e) = &self.encoder {
            e.visit_params(f);
        }
        self.fusion.visit_params(f);
        for s in &self.stages {
            s.up.visit_params(f);
            s.conv.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        if let Some(e) = &mut self.encoder {
            e.visit_params_mut(f);
        }
        self.fusion.visit_params_mut(f);
        for s in &mut self.stages {
            s.up.visit_params_mut(f);
            s.conv.visit_params_mut(f);
        }
    }
}

/// Trainable inversion model: architecture, expected explanation kind and
/// network.
pub struct InversionModel {
    spec: InversionSpec,
    explanation_kind: Option<ExplanationKind>,
    net: InversionNet<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct InversionHeader {
    spec: InversionSpec,
    explanation_kind: Option<ExplanationKind>,
}

impl InversionModel {
    /// Builds the network for `spec`. `explanation_kind` names which
    /// explanation of a tuple feeds the model and must be absent exactly for
    /// prediction-only models.
    pub fn build(spec: InversionSpec, explanation_kind: Option<ExplanationKind>, seed: u64) -> Result<Self> {
        if spec.method.needs_explanation() != explanation_kind.is_some() {
            return Err(Error::Config(format!(
                "{} {} an explanation kind",
                spec.method.as_str(),
                if spec.method.needs_explanation() { "requires" } else { "takes no" }
            )));
        }
        let net = InversionNet::build(&spec, seed)?;
        Ok(Self { spec, explanation_kind, net })
    }

    pub fn spec(&self) -> &InversionSpec {
        &self.spec
    }

    pub fn explanation_kind(&self) -> Option<ExplanationKind> {
        self.explanation_kind
    }

    pub fn net(&self) -> &InversionNet<f32> {
        &self.net
    }

    /// Builds the `y` and explanation tensors for a set of tuples.
    fn inputs<T: Real>(&self, tuples: &[&BreachedTuple]) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let c = self.spec.class_count;
        let n = tuples.len();
        let mut y = vec![T::zero(); c * n];
        for (j, t) in tuples.iter().enumerate() {
            if t.prediction.confidences.len() != c {
                return Err(Error::Shape(format!(
                    "prediction of width {} for a {c}-class model",
                    t.prediction.confidences.len()
                )));
            }
            for (i, &p) in t.prediction.confidences.iter().enumerate() {
                y[i * n + j] = T::from_f64_lossy(p as f64);
            }
        }
        let y = Tensor::from_vec(&[c, n], y)?;
        let (Some(kind), Some(shape)) = (self.explanation_kind, self.spec.explanation) else {
            return Ok((y, None));
        };
        let plane = shape.height * shape.width;
        let mut e = vec![T::zero(); shape.len() * n];
        for (j, t) in tuples.iter().enumerate() {
            let ex = t
                .explanation(kind)
                .ok_or_else(|| Error::Invalid(format!("tuple lacks the required {} explanation", kind.as_str())))?;
            if ex.shape() != shape {
                return Err(Error::Shape(format!("explanation {:?}, model expects {:?}", ex.shape(), shape)));
            }
            let normalized;
            let values = if ex.is_normalized() {
                ex.values()
            } else {
                normalized = ex.normalized();
                normalized.values()
            };
            for d in 0..shape.depth {
                let dst = &mut e[(d * n + j) * plane..(d * n + j + 1) * plane];
                for (o, &v) in dst.iter_mut().zip(&values[d * plane..(d + 1) * plane]) {
                    *o = T::from_f64_lossy(v as f64);
                }
            }
        }
        Ok((y, Some(Tensor::from_vec(&[shape.depth, n, shape.height, shape.width], e)?)))
    }

    /// Reconstructs one image (clamped to `[0,1]`).
    pub fn invert(&self, tuple: &BreachedTuple) -> Result<ImageTensor> {
        Ok(self.invert_batch(&[tuple], Parallelism::Sequential)?.remove(0))
    }

    pub fn invert_batch(&self, tuples: &[&BreachedTuple], mode: Parallelism) -> Result<Vec<ImageTensor>> {
        let (h, w, c) = self.spec.output_shape;
        let parts = map_chunks(mode, tuples, INFER_CHUNK, |chunk| -> Result<Vec<ImageTensor>> {
            let (y, e) = self.inputs::<f32>(chunk)?;
            let out = self.net.forward(&y, e.as_ref())?;
            let n = chunk.len();
            let plane = h * w;
            (0..n)
                .map(|j| {
                    let mut px = Vec::with_capacity(c * plane);
                    for ch in 0..c {
                        px.extend_from_slice(&out.data()[(ch * n + j) * plane..(ch * n + j + 1) * plane]);
                    }
                    ImageTensor::from_clamped(h, w, c, &px)
                })
                .collect()
        });
        let mut out = Vec::with_capacity(tuples.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Summed per-sample MSE of the unclamped output over `chunk`, with its
    /// parameter gradient accumulated into `grad`.
    pub(crate) fn chunk_loss<T: Real>(
        net: &InversionNet<T>,
        model: &InversionModel,
        tuples: &[&BreachedTuple],
        targets: &[&ImageTensor],
        grad: Option<&mut [T]>,
    ) -> Result<f64> {
        let (y, e) = model.inputs::<T>(tuples)?;
        let target = to_batch::<T>(targets)?;
        let state = net.forward_state(&y, e.as_ref())?;
        let out = state.stages.last().map(|(_, c)| c.output()).unwrap_or(state.fusion.output());
        if out.shape() != target.shape() {
            return Err(Error::Shape(format!("reconstruction {:?} vs image {:?}", out.shape(), target.shape())));
        }
        let (sum, dl) = squared_error(out, &target);
        let per = (out.len() / tuples.len()) as f64;
        if let Some(grad) = grad {
            let scale = T::from_f64_lossy(1.0 / per);
            net.backward(&state, dl.map(|v| v * scale), grad)?;
        }
        Ok(sum / per)
    }

    pub fn save(&self, dir: &Path) -> Result<String> {
        let header = InversionHeader { spec: self.spec.clone(), explanation_kind: self.explanation_kind };
        checkpoint::save(dir, "inversion", &header, &self.net)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (header, flat) = checkpoint::load::<InversionHeader>(dir, "inversion")?;
        let mut model = Self::build(header.spec.spec, header.spec.explanation_kind, 0)?;
        checkpoint::restore(&mut model.net, &header.tensors, &flat)?;
        Ok(model)
    }
}

impl Params<f32> for InversionModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[f32])) {
        self.net.visit_params(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f32])) {
        self.net.visit_params_mut(f)
    }
}

fn nn_err(e: Error) -> NnError {
    match e {
        Error::Nn(e) => e,
        other => NnError::Shape(other.to_string()),
    }
}

/// Deterministic 90/10 train/validation split: every tenth item validates.
pub fn validation_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    if n < 10 {
        return ((0..n).collect(), Vec::new());
    }
    (0..n).partition(|i| i % 10 != 9)
}

/// Trains on squared reconstruction error between the model output for each
/// tuple and its source image. `images[t.source_index]` is the target of
/// tuple `t`. Returns the weights of the epoch with the lowest validation
/// loss when a validation split exists.
pub fn train_inversion(
    model: InversionModel,
    tuples: &[BreachedTuple],
    images: &[ImageTensor],
    cfg: &TrainingConfig,
    mode: Parallelism,
) -> Result<(InversionModel, TrainingLog)> {
    cfg.validate()?;
    if tuples.is_empty() {
        return Err(Error::Invalid("no training tuples".into()));
    }
    let targets = tuples
        .iter()
        .map(|t| {
            let i = t.source_index.ok_or_else(|| Error::Invalid("training tuple without source index".into()))?;
            images.get(i).ok_or_else(|| Error::Invalid(format!("source index {i} outside image collection")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (train_idx, val_idx) = validation_split(tuples.len());
    let mut model = model;
    let n_params = model.net.num_params();
    let mut adam = Adam::new(cfg.adam(), n_params);
    let mut log = TrainingLog::default();
    // lowest validation loss so far: (loss, epoch, weights)
    let mut best: Option<(f64, usize, Vec<f32>)> = None;
    for (epoch, batches) in cfg.epoch_batches(train_idx.len()).enumerate() {
        let mut total = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let batch: Vec<usize> = batch.iter().map(|&b| train_idx[b]).collect();
            let m = &model;
            let (loss, mut grad) = batch_gradient(mode, &batch, cfg.chunk_size, n_params, |chunk, g| {
                let ts: Vec<&BreachedTuple> = chunk.iter().map(|&i| &tuples[i]).collect();
                let ims: Vec<&ImageTensor> = chunk.iter().map(|&i| targets[i]).collect();
                InversionModel::chunk_loss(&m.net, m, &ts, &ims, Some(g)).map_err(nn_err)
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("reconstruction loss {loss} at epoch {epoch}, step {step}")));
            }
            let scale = 1.0 / batch.len() as f32;
            grad.iter_mut().for_each(|v| *v *= scale);
            adam.step(&mut model.net, &grad);
            total += loss;
        }
        let validation_loss = if val_idx.is_empty() {
            None
        } else {
            let m = &model;
            let parts = map_chunks(mode, &val_idx, INFER_CHUNK, |chunk| {
                let ts: Vec<&BreachedTuple> = chunk.iter().map(|&i| &tuples[i]).collect();
                let ims: Vec<&ImageTensor> = chunk.iter().map(|&i| targets[i]).collect();
                InversionModel::chunk_loss::<f32>(&m.net, m, &ts, &ims, None)
            });
            let mut s = 0.0;
            for p in parts {
                s += p?;
            }
            Some(s / val_idx.len() as f64)
        };
        let rec =
            EpochRecord { epoch, train_loss: total / train_idx.len() as f64, heldout_accuracy: None, validation_loss };
        log::info!(
            "{} epoch {epoch}: mse {:.5} val {:?}",
            model.spec.method.as_str(),
            rec.train_loss,
            rec.validation_loss
        );
        if let Some(v) = rec.validation_loss {
            if best.is_none() || best.as_ref().is_some_and(|b| v < b.0) {
                best = Some((v, epoch, model.net.flat_params()));
            }
        }
        log.epochs.push(rec);
    }
    if let Some((_, epoch, weights)) = best {
        if epoch + 1 < log.epochs.len() {
            model.net.set_flat_params(&weights)?;
            log.selected_epoch = Some(epoch);
        }
    }
    Ok((model, log))
}

/// Manifest of an append-only breach store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreachManifest {
    pub format: String,
    pub run_id: String,
    pub class_count: usize,
    pub explanation_kinds: Vec<ExplanationKind>,
    pub explanation_shapes: Vec<ExplanationShape>,
    /// Layer each explanation was read from; fixed by the first append.
    #[serde(default)]
    pub source_layers: Vec<Option<String>>,
    pub target_checksum: String,
    pub split_checksum: String,
    /// Which split the queried images came from.
    pub split: String,
    pub parts: Vec<BreachPart>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreachPart {
    pub dir: String,
    pub count: usize,
}

impl BreachManifest {
    pub fn count(&self) -> usize {
        self.parts.iter().map(|p| p.count).sum()
    }
}

/// Directory of `.npy` arrays (one subdirectory per appended part) plus
/// `manifest.json`.
///
/// Each part holds `predictions.npy` (`N × |C|` f32), `source_indices.npy`
/// (`N` i64, −1 when absent), `explained_classes.npy` (`N × K` i64, −1 for
/// class-free stacks) and `explanations_<kind>.npy` (`N × D × H × W` f32, raw
/// values).
pub struct BreachStore {
    dir: PathBuf,
    manifest: BreachManifest,
}

pub const BREACH_FORMAT: &str = "xaimi-breach/1";

impl BreachStore {
    pub fn create(
        dir: &Path,
        run_id: &str,
        class_count: usize,
        kinds: Vec<(ExplanationKind, ExplanationShape)>,
        target_checksum: &str,
        split_checksum: &str,
        split: &str,
    ) -> Result<Self> {
        if dir.join("manifest.json").exists() {
            return Err(Error::Invalid(format!("breach store {} already exists", dir.display())));
        }
        let manifest = BreachManifest {
            format: BREACH_FORMAT.into(),
            run_id: run_id.into(),
            class_count,
            explanation_kinds: kinds.iter().map(|k| k.0).collect(),
            explanation_shapes: kinds.iter().map(|k| k.1).collect(),
            source_layers: Vec::new(),
            target_checksum: target_checksum.into(),
            split_checksum: split_checksum.into(),
            split: split.into(),
            parts: Vec::new(),
        };
        io::write_json(&dir.join("manifest.json"), &manifest)?;
        Ok(Self { dir: dir.into(), manifest })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let manifest: BreachManifest = io::read_json(&dir.join("manifest.json"))?;
        if manifest.format != BREACH_FORMAT {
            return Err(Error::Load { path: dir.into(), reason: format!("unknown format {}", manifest.format) });
        }
        Ok(Self { dir: dir.into(), manifest })
    }

    pub fn manifest(&self) -> &BreachManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Appends tuples as a new part; existing parts are never rewritten.
    pub fn append(&mut self, tuples: &[BreachedTuple]) -> Result<()> {
        if tuples.is_empty() {
            return Ok(());
        }
        let m = &self.manifest;
        let n = tuples.len();
        let c = m.class_count;
        let mut preds = Vec::with_capacity(n * c);
        let mut sources = Vec::with_capacity(n);
        let mut classes = Vec::with_capacity(n * m.explanation_kinds.len());
        let mut expl: Vec<Vec<f32>> = vec![Vec::new(); m.explanation_kinds.len()];
        for t in tuples {
            if t.prediction.confidences.len() != c {
                return Err(Error::Shape(format!(
                    "prediction width {} in a {c}-class store",
                    t.prediction.confidences.len()
                )));
            }
            if t.explanations.len() != m.explanation_kinds.len() {
                return Err(Error::Invalid("explanation kinds must be uniform within a breach store".into()));
            }
            preds.extend_from_slice(&t.prediction.confidences);
            sources.push(t.source_index.map_or(-1, |i| i as i64));
            for (k, ((kind, shape), e)) in
                m.explanation_kinds.iter().zip(&m.explanation_shapes).zip(&t.explanations).enumerate()
            {
                if e.kind() != *kind || e.shape() != *shape || e.is_normalized() {
                    return Err(Error::Invalid(format!(
                        "explanation {:?} {:?} does not match store entry {:?} {:?} (raw values expected)",
                        e.kind(),
                        e.shape(),
                        kind,
                        shape
                    )));
                }
                expl[k].extend_from_slice(e.values());
                classes.push(match e {
                    Explanation::Map(m) => m.explained_class as i64,
                    Explanation::Stack(s) => s.explained_class.map_or(-1, |c| c as i64),
                });
            }
        }
        let layers: Vec<Option<String>> =
            tuples[0].explanations.iter().map(|e| e.source_layer().map(String::from)).collect();
        if tuples
            .iter()
            .any(|t| t.explanations.iter().map(|e| e.source_layer()).ne(layers.iter().map(|l| l.as_deref())))
            || (!m.source_layers.is_empty() && m.source_layers != layers)
        {
            return Err(Error::Invalid("explanation source layers must be uniform within a breach store".into()));
        }
        let name = format!("part-{:05}", self.manifest.parts.len());
        let part = self.dir.join(&name);
        if part.exists() {
            return Err(Error::Invalid(format!("breach part {} already exists", part.display())));
        }
        io::write_npy(&part.join("predictions.npy"), &[n, c], &preds)?;
        io::write_npy(&part.join("source_indices.npy"), &[n], &sources)?;
        io::write_npy(&part.join("explained_classes.npy"), &[n, m.explanation_kinds.len()], &classes)?;
        for ((kind, shape), values) in m.explanation_kinds.iter().zip(&m.explanation_shapes).zip(&expl) {
            io::write_npy(
                &part.join(format!("explanations_{}.npy", kind.as_str())),
                &[n, shape.depth, shape.height, shape.width],
                values,
            )?;
        }
        self.manifest.source_layers = layers;
        self.manifest.parts.push(BreachPart { dir: name, count: n });
        io::write_json(&self.dir.join("manifest.json"), &self.manifest)
    }

    /// Loads every tuple in append order.
    pub fn load(&self) -> Result<Vec<BreachedTuple>> {
        let m = &self.manifest;
        let mut out = Vec::with_capacity(m.count());
        for part in &m.parts {
            let p = self.dir.join(&part.dir);
            let (_, preds) = io::read_npy::<f32>(&p.join("predictions.npy"))?;
            let (_, sources) = io::read_npy::<i64>(&p.join("source_indices.npy"))?;
            let (_, classes) = io::read_npy::<i64>(&p.join("explained_classes.npy"))?;
            let mut expl = Vec::new();
            for kind in &m.explanation_kinds {
                expl.push(io::read_npy::<f32>(&p.join(format!("explanations_{}.npy", kind.as_str())))?.1);
            }
            let k = m.explanation_kinds.len();
            if preds.len() != part.count * m.class_count
                || sources.len() != part.count
                || classes.len() != part.count * k
            {
                return Err(Error::Load { path: p, reason: "array lengths disagree with manifest".into() });
            }
            for j in 0..part.count {
                let explanations = m
                    .explanation_kinds
                    .iter()
                    .zip(&m.explanation_shapes)
                    .zip(&expl)
                    .enumerate()
                    .map(|(ki, ((&kind, shape), values))| {
                        let layer = m.source_layers.get(ki).cloned().flatten();
                        let len = shape.len();
                        let v = values[j * len..(j + 1) * len].to_vec();
                        let class = classes[j * k + ki];
                        if kind.is_stack() {
                            Explanation::Stack(ExplanationStack {
                                kind,
                                explained_class: (class >= 0).then_some(class as usize),
                                source_layer: layer,
                                depth: shape.depth,
                                height: shape.height,
                                width: shape.width,
                                normalized: false,
                                maps: v,
                            })
                        } else {
                            Explanation::Map(ExplanationMap {
                                kind,
                                explained_class: class.max(0) as usize,
                                source_layer: layer,
                                height: shape.height,
                                width: shape.width,
                                normalized: false,
                                values: v,
                            })
                        }
                    })
                    .collect();
                out.push(BreachedTuple {
                    prediction: PredictionVector {
                        confidences: preds[j * m.class_count..(j + 1) * m.class_count].to_vec(),
                    },
                    explanations,
                    source_index: (sources[j] >= 0).then_some(sources[j] as usize),
                    run_id: m.run_id.clone(),
                });
            }
        }
        Ok(out)
    }

    pub fn remove_dir(self) -> Result<()> {
        fs::remove_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetProfile, LabelKind};
    use crate::spec::InversionMethod;
    use rand::{Rng, SeedableRng};

    fn profile() -> DatasetProfile {
        DatasetProfile {
            name: "tiny".into(),
            image_size: (8, 8),
            channels: 1,
            class_count: 3,
            label_kind: LabelKind::Target,
        }
    }

    fn tuple(rng: &mut ChaCha8Rng, kind: ExplanationKind, shape: ExplanationShape, source: usize) -> BreachedTuple {
        let logits: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let values: Vec<f32> = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let explanation = if kind.is_stack() {
            Explanation::Stack(ExplanationStack {
                kind,
                explained_class: Some(0),
                source_layer: None,
                depth: shape.depth,
                height: shape.height,
                width: shape.width,
                normalized: false,
                maps: values,
            })
        } else {
            Explanation::Map(ExplanationMap {
                kind,
                explained_class: 0,
                source_layer: None,
                height: shape.height,
                width: shape.width,
                normalized: false,
                values,
            })
        };
        BreachedTuple {
            prediction: PredictionVector::from_logits(&logits),
            explanations: vec![explanation],
            source_index: Some(source),
            run_id: "t".into(),
        }
    }

    fn model(method: InversionMethod, kind: ExplanationKind, shape: ExplanationShape) -> InversionModel {
        let e = method.needs_explanation().then_some(shape);
        let spec = InversionSpec::build(method, &profile(), e, 64).unwrap();
        InversionModel::build(spec, e.map(|_| kind), 3).unwrap()
    }

    fn images(n: usize, seed: u64) -> Vec<ImageTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| ImageTensor::new(8, 8, 1, (0..64).map(|_| rng.random::<f32>()).collect()).unwrap()).collect()
    }

    fn gradient_check(method: InversionMethod, kind: ExplanationKind, shape: ExplanationShape) {
        let m = model(method, kind, shape);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // zero biases can park whole ReLU layers exactly on the kink
        let mut net = m.net.cast::<f64>();
        let jittered: Vec<f64> = net.flat_params().iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
        net.set_flat_params(&jittered).unwrap();
        let ts: Vec<BreachedTuple> = (0..2).map(|i| tuple(&mut rng, kind, shape, i)).collect();
        let ims = images(2, 5);
        let tr: Vec<&BreachedTuple> = ts.iter().collect();
        let ir: Vec<&ImageTensor> = ims.iter().collect();
        let mut grad = vec![0.0f64; net.num_params()];
        InversionModel::chunk_loss(&net, &m, &tr, &ir, Some(&mut grad)).unwrap();
        let flat = net.flat_params();
        let h = 1e-6;
        let mut names = Vec::new();
        net.visit_params(&mut |n, p| names.extend(std::iter::repeat_n(n.to_string(), p.len())));
        for _ in 0..40 {
            let k = rng.random_range(0..flat.len());
            let mut probe = m.net.cast::<f64>();
            let mut p = flat.clone();
            p[k] += h;
            probe.set_flat_params(&p).unwrap();
            let up = InversionModel::chunk_loss(&probe, &m, &tr, &ir, None).unwrap();
            p[k] -= 2.0 * h;
            probe.set_flat_params(&p).unwrap();
            let down = InversionModel::chunk_loss(&probe, &m, &tr, &ir, None).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - grad[k]).abs() <= 1e-5 + 1e-4 * fd.abs(),
                "{} param {k} ({}): fd {fd} vs analytic {}",
                method.as_str(),
                names[k],
                grad[k]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let map = ExplanationShape::map(8, 8);
        for method in InversionMethod::ALL {
            gradient_check(method, ExplanationKind::Gradient, map);
        }
        gradient_check(
            InversionMethod::FlattenUnet,
            ExplanationKind::PartialCam,
            ExplanationShape { depth: 3, height: 4, width: 4 },
        );
    }

    #[test]
    fn output_shape_and_range() {
        let shape = ExplanationShape::map(4, 4);
        let m = model(InversionMethod::Unet, ExplanationKind::GradCam, shape);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = tuple(&mut rng, ExplanationKind::GradCam, shape, 0);
        let out = m.invert(&t).unwrap();
        assert_eq!(out.shape(), (8, 8, 1));
        assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn prediction_only_ignores_explanations() {
        let shape = ExplanationShape::map(8, 8);
        let m = model(InversionMethod::PredictionOnly, ExplanationKind::Gradient, shape);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = tuple(&mut rng, ExplanationKind::Gradient, shape, 0);
        let mut b = tuple(&mut rng, ExplanationKind::Gradient, shape, 0);
        b.prediction = a.prediction.clone();
        b.source_index = None;
        assert_eq!(m.invert(&a).unwrap(), m.invert(&b).unwrap());
        b.explanations.clear();
        assert_eq!(m.invert(&a).unwrap(), m.invert(&b).unwrap());
    }

    #[test]
    fn missing_or_mismatched_explanation_is_rejected() {
        let shape = ExplanationShape::map(8, 8);
        let m = model(InversionMethod::Unet, ExplanationKind::Gradient, shape);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = tuple(&mut rng, ExplanationKind::Gradient, shape, 0);
        t.explanations.clear();
        assert!(matches!(m.invert(&t), Err(Error::Invalid(_))));
        let t = tuple(&mut rng, ExplanationKind::Gradient, ExplanationShape::map(4, 4), 0);
        assert!(matches!(m.invert(&t), Err(Error::Shape(_))));
        let spec = InversionSpec::build(InversionMethod::Unet, &profile(), Some(shape), 64).unwrap();
        assert!(matches!(InversionModel::build(spec, None, 0), Err(Error::Config(_))));
    }

    #[test]
    fn memorizes_a_single_pair() {
        let shape = ExplanationShape::map(8, 8);
        let m = model(InversionMethod::Unet, ExplanationKind::Gradient, shape);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = tuple(&mut rng, ExplanationKind::Gradient, shape, 0);
        let ims = images(1, 9);
        let ts = vec![t.clone(); 8];
        let cfg =
            TrainingConfig { learning_rate: 1e-2, beta1: 0.9, epochs: 400, batch_size: 8, ..TrainingConfig::default() };
        let (m, log) = train_inversion(m, &ts, &ims, &cfg, Parallelism::default()).unwrap();
        assert!(log.last_loss().unwrap() < log.first_loss().unwrap());
        let out = m.invert(&t).unwrap();
        let mse: f32 = out.pixels().iter().zip(ims[0].pixels()).map(|(a, b)| (a - b) * (a - b)).sum::<f32>() / 64.0;
        assert!(mse < 1e-3, "mse {mse}");
    }

    #[test]
    fn zero_epochs_leaves_parameters_untouched() {
        let shape = ExplanationShape::map(8, 8);
        let m = model(InversionMethod::Flatten, ExplanationKind::Gradient, shape);
        let before = m.net.flat_params();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ts: Vec<_> = (0..4).map(|i| tuple(&mut rng, ExplanationKind::Gradient, shape, i)).collect();
        let cfg = TrainingConfig { epochs: 0, ..TrainingConfig::default() };
        let (m, log) = train_inversion(m, &ts, &images(4, 1), &cfg, Parallelism::Sequential).unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(m.net.flat_params(), before);
    }

    #[test]
    fn parallel_and_sequential_training_agree() {
        let shape = ExplanationShape::map(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ts: Vec<_> = (0..40).map(|i| tuple(&mut rng, ExplanationKind::Gradient, shape, i)).collect();
        let ims = images(40, 2);
        let cfg = TrainingConfig { epochs: 2, batch_size: 16, chunk_size: 4, ..TrainingConfig::default() };
        let run = |mode| {
            let m = model(InversionMethod::FlattenUnet, ExplanationKind::Gradient, shape);
            let (m, log) = train_inversion(m, &ts, &ims, &cfg, mode).unwrap();
            (m.net.flat_params(), log)
        };
        assert_eq!(run(Parallelism::Sequential), run(Parallelism::Rayon));
    }

    #[test]
    fn validation_split_is_deterministic_tenth() {
        let (t, v) = validation_split(25);
        assert_eq!(v, vec![9, 19]);
        assert_eq!(t.len(), 23);
        assert!(validation_split(5).1.is_empty());
    }

    #[test]
    fn training_requires_source_images() {
        let shape = ExplanationShape::map(8, 8);
        let m = model(InversionMethod::Flatten, ExplanationKind::Gradient, shape);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = tuple(&mut rng, ExplanationKind::Gradient, shape, 3);
        assert!(train_inversion(m, &[t.clone()], &images(2, 0), &TrainingConfig::default(), Parallelism::Sequential)
            .is_err());
        t.source_index = None;
        let m = model(InversionMethod::Flatten, ExplanationKind::Gradient, shape);
        assert!(train_inversion(m, &[t], &images(2, 0), &TrainingConfig::default(), Parallelism::Sequential).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let shape = ExplanationShape { depth: 3, height: 4, width: 4 };
        let m = model(InversionMethod::FlattenUnet, ExplanationKind::PartialCam, shape);
        m.save(dir.path()).unwrap();
        let back = InversionModel::load(dir.path()).unwrap();
        assert_eq!(back.spec(), m.spec());
        assert_eq!(back.explanation_kind(), Some(ExplanationKind::PartialCam));
        let a: Vec<u32> = m.net.flat_params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.net.flat_params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn breach_store_round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let shape = ExplanationShape { depth: 3, height: 4, width: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ts: Vec<_> = (0..5).map(|i| tuple(&mut rng, ExplanationKind::PartialCam, shape, i)).collect();
        let path = dir.path().join("breach");
        let mut store = BreachStore::create(
            &path,
            "t",
            3,
            vec![(ExplanationKind::PartialCam, shape)],
            "abc",
            "def",
            "attack_train",
        )
        .unwrap();
        store.append(&ts[..3]).unwrap();
        store.append(&ts[3..]).unwrap();
        let store = BreachStore::open(&path).unwrap();
        assert_eq!(store.manifest().count(), 5);
        assert_eq!(store.manifest().parts.len(), 2);
        assert_eq!(store.load().unwrap(), ts);
        assert!(BreachStore::create(&path, "t", 3, vec![], "abc", "def", "attack_train").is_err());
    }

    #[test]
    fn breach_store_rejects_nonuniform_tuples() {
        let dir = tempfile::tempdir().unwrap();
        let shape = ExplanationShape::map(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store =
            BreachStore::create(dir.path(), "t", 3, vec![(ExplanationKind::GradCam, shape)], "a", "b", "attack_train")
                .unwrap();
        let bad = tuple(&mut rng, ExplanationKind::Gradient, shape, 0);
        assert!(store.append(&[bad]).is_err());
        let mut norm = tuple(&mut rng, ExplanationKind::GradCam, shape, 0);
        norm.explanations[0] = norm.explanations[0].normalized();
        assert!(store.append(&[norm]).is_err());
    }
}
