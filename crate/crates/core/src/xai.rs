//! Saliency explanations of classifier decisions.
//!
//! All derivatives are taken of the pre-softmax score of the explained class.
//! Batched engines work on any [`Sequential`] in channel-major layout;
//! [`explain`] and the single-image helpers wrap them for [`Classifier`]s.

use serde::{Deserialize, Serialize};
use xaimi_nn::parallel::map_chunks;
use xaimi_nn::{Layer, MaxPool2d, Parallelism, Real, Sequential, Tensor, Trace};

use crate::error::{Error, Result};
use crate::image::{to_batch, ImageTensor};
use crate::spec::ExplanationShape;
use crate::zoo::{last_conv_index, Classifier, INFER_CHUNK};

/// Stabiliser of the LRP ε-rule.
pub const LRP_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationKind {
    Gradient,
    GradInput,
    GradCam,
    Lrp,
    SigmaCam,
    PartialCam,
}

impl ExplanationKind {
    pub const ALL: [ExplanationKind; 6] = [
        ExplanationKind::Gradient,
        ExplanationKind::GradInput,
        ExplanationKind::GradCam,
        ExplanationKind::Lrp,
        ExplanationKind::SigmaCam,
        ExplanationKind::PartialCam,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExplanationKind::Gradient => "gradient",
            ExplanationKind::GradInput => "grad_input",
            ExplanationKind::GradCam => "grad_cam",
            ExplanationKind::Lrp => "lrp",
            ExplanationKind::SigmaCam => "sigma_cam",
            ExplanationKind::PartialCam => "partial_cam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown explanation kind `{s}`")))
    }

    pub fn is_stack(self) -> bool {
        matches!(self, ExplanationKind::SigmaCam | ExplanationKind::PartialCam)
    }

    /// Whether the map lives at the last conv layer's resolution.
    pub fn is_cam(self) -> bool {
        matches!(self, ExplanationKind::GradCam | ExplanationKind::SigmaCam | ExplanationKind::PartialCam)
    }

    /// Shape this kind produces for `model`.
    pub fn shape_for(self, model: &Classifier) -> Result<ExplanationShape> {
        let (h, w, _) = model.spec().input_shape;
        if !self.is_cam() {
            return Ok(ExplanationShape::map(h, w));
        }
        let shapes = model.spec().validate()?;
        let (i, last) =
            model
                .spec()
                .layers
                .iter()
                .enumerate()
                .rfind(|(_, l)| l.kind == crate::spec::LayerKind::Conv)
                .ok_or_else(|| Error::UnsupportedExplanation(format!("{} has no conv layer", model.spec().name)))?;
        let crate::spec::FeatureShape::Spatial { h, w, c } = shapes[i] else {
            return Err(Error::Shape(format!("{} is not spatial", last.name)));
        };
        Ok(ExplanationShape {
            depth: match self {
                ExplanationKind::SigmaCam => model.class_count(),
                ExplanationKind::PartialCam => c,
                _ => 1,
            },
            height: h,
            width: w,
        })
    }
}

/// Single 2-D saliency map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationMap {
    pub kind: ExplanationKind,
    pub explained_class: usize,
    pub source_layer: Option<String>,
    pub height: usize,
    pub width: usize,
    pub normalized: bool,
    pub values: Vec<f32>,
}

/// Stack of `depth` maps (Σ-CAM over classes, ∂-CAM over kernels).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationStack {
    pub kind: ExplanationKind,
    /// Class whose weights built a ∂-CAM; `None` for Σ-CAM.
    pub explained_class: Option<usize>,
    pub source_layer: Option<String>,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub normalized: bool,
    pub maps: Vec<f32>,
}

impl ExplanationStack {
    pub fn slice(&self, d: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.maps[d * plane..(d + 1) * plane]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum Explanation {
    Map(ExplanationMap),
    Stack(ExplanationStack),
}

impl Explanation {
    pub fn kind(&self) -> ExplanationKind {
        match self {
            Explanation::Map(m) => m.kind,
            Explanation::Stack(s) => s.kind,
        }
    }

    pub fn shape(&self) -> ExplanationShape {
        match self {
            Explanation::Map(m) => ExplanationShape::map(m.height, m.width),
            Explanation::Stack(s) => ExplanationShape { depth: s.depth, height: s.height, width: s.width },
        }
    }

    pub fn source_layer(&self) -> Option<&str> {
        match self {
            Explanation::Map(m) => m.source_layer.as_deref(),
            Explanation::Stack(s) => s.source_layer.as_deref(),
        }
    }

    pub fn values(&self) -> &[f32] {
        match self {
            Explanation::Map(m) => &m.values,
            Explanation::Stack(s) => &s.maps,
        }
    }

    pub fn is_normalized(&self) -> bool {
        match self {
            Explanation::Map(m) => m.normalized,
            Explanation::Stack(s) => s.normalized,
        }
    }

    /// Min-max scaled copy (whole stack at once for stacks).
    pub fn normalized(&self) -> Self {
        match self {
            Explanation::Map(m) => {
                Explanation::Map(ExplanationMap { values: normalize_min_max(&m.values), normalized: true, ..m.clone() })
            }
            Explanation::Stack(s) => {
                Explanation::Stack(ExplanationStack { maps: normalize_min_max(&s.maps), normalized: true, ..s.clone() })
            }
        }
    }
}

/// Scales to `[0,1]`; constant inputs map to all zeros.
pub fn normalize_min_max(values: &[f32]) -> Vec<f32> {
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

fn class_seed<T: Real>(out: &Tensor<T>, classes: &[usize]) -> Result<Tensor<T>> {
    let [c, n] = out.dims2()?;
    if classes.len() != n {
        return Err(Error::Shape(format!("{} classes for a batch of {n}", classes.len())));
    }
    let mut seed = Tensor::zeros(&[c, n]);
    for (j, &k) in classes.iter().enumerate() {
        if k >= c {
            return Err(Error::Invalid(format!("class {k} outside [0, {c})")));
        }
        seed.data_mut()[k * n + j] = T::one();
    }
    Ok(seed)
}

/// ∂score/∂input for each sample's class, shaped like the input batch.
pub fn gradient_batch<T: Real>(net: &Sequential<T>, x: &Tensor<T>, classes: &[usize]) -> Result<Tensor<T>> {
    let trace = net.forward_trace(x)?;
    let seed = class_seed(trace.output(), classes)?;
    Ok(net.backward(&trace, seed, None, 0, true)?.expect("input gradient requested"))
}

pub fn grad_input_batch<T: Real>(net: &Sequential<T>, x: &Tensor<T>, classes: &[usize]) -> Result<Tensor<T>> {
    let g = gradient_batch(net, x, classes)?;
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| a * b).collect();
    Ok(Tensor::from_vec(x.shape(), data)?)
}

/// Ingredients of Grad-CAM at the last conv layer's post-activation output.
#[derive(Clone, Debug)]
pub struct CamParts<T> {
    pub layer: String,
    /// `[K, N]`: spatial mean of ∂score/∂A.
    pub alpha: Vec<T>,
    /// `[K, N, h, w]`
    pub activations: Tensor<T>,
}

impl<T: Real> CamParts<T> {
    fn dims(&self) -> [usize; 4] {
        self.activations.dims4().expect("4-d activations")
    }

    /// `α_k · A^k` for sample `j`, `K × h × w`.
    pub fn partial(&self, j: usize) -> Vec<T> {
        let [k, n, h, w] = self.dims();
        let a = self.activations.data();
        let plane = h * w;
        let mut out = Vec::with_capacity(k * plane);
        for kk in 0..k {
            let al = self.alpha[kk * n + j];
            out.extend(a[(kk * n + j) * plane..(kk * n + j + 1) * plane].iter().map(|&v| al * v));
        }
        out
    }

    /// `ReLU(Σ_k α_k A^k)` for sample `j`, summed in kernel order so it
    /// matches a recomposition of [`CamParts::partial`] exactly.
    pub fn cam(&self, j: usize) -> Vec<T> {
        let [k, _, h, w] = self.dims();
        let plane = h * w;
        let parts = self.partial(j);
        let mut acc = vec![T::zero(); plane];
        for kk in 0..k {
            for (s, &p) in acc.iter_mut().zip(&parts[kk * plane..(kk + 1) * plane]) {
                *s += p;
            }
        }
        acc.into_iter().map(|v| if v > T::zero() { v } else { T::zero() }).collect()
    }
}

fn cam_layer<T: Real>(net: &Sequential<T>) -> Result<(usize, String)> {
    let conv = last_conv_index(net).ok_or_else(|| Error::UnsupportedExplanation("model has no conv layer".into()))?;
    // Read after the conv's activation when one follows.
    let at = match net.layers.get(conv + 1) {
        Some((_, Layer::Relu)) => conv + 2,
        _ => conv + 1,
    };
    Ok((at, net.layers[conv].0.clone()))
}

pub fn cam_parts_from_trace<T: Real>(net: &Sequential<T>, trace: &Trace<T>, classes: &[usize]) -> Result<CamParts<T>> {
    let (at, layer) = cam_layer(net)?;
    let seed = class_seed(trace.output(), classes)?;
    let d_a = net.backward(trace, seed, None, at, true)?.expect("activation gradient requested");
    let [k, n, h, w] = d_a.dims4()?;
    let inv = T::from_f64_lossy(1.0 / (h * w) as f64);
    let alpha = d_a
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().copied().fold(T::zero(), |s, v| s + v) * inv)
        .collect::<Vec<T>>();
    debug_assert_eq!(alpha.len(), k * n);
    Ok(CamParts { layer, alpha, activations: trace.acts[at].clone() })
}

pub fn cam_parts<T: Real>(net: &Sequential<T>, x: &Tensor<T>, classes: &[usize]) -> Result<CamParts<T>> {
    let trace = net.forward_trace(x)?;
    cam_parts_from_trace(net, &trace, classes)
}

/// ε-LRP relevance at the input, shaped like the input batch.
///
/// Relevance starts as the explained class's score and is redistributed in
/// proportion to the weighted contributions `a_i w_ij` (biases excluded from
/// the denominators, so the total is conserved up to the ε leak); ReLU
/// passes relevance through and max-pooling routes it to the winner.
pub fn lrp_batch<T: Real>(net: &Sequential<T>, x: &Tensor<T>, classes: &[usize], eps: f64) -> Result<Tensor<T>> {
    let trace = net.forward_trace(x)?;
    let out = trace.output();
    let seed = class_seed(out, classes)?;
    let mut r = Tensor::from_vec(out.shape(), seed.data().iter().zip(out.data()).map(|(&s, &y)| s * y).collect())?;
    let eps = T::from_f64_lossy(eps);
    let stabilise = |z: &Tensor<T>, r: &Tensor<T>| -> Tensor<T> {
        let data =
            z.data().iter().zip(r.data()).map(|(&z, &r)| r / (z + if z >= T::zero() { eps } else { -eps })).collect();
        Tensor::from_vec(z.shape(), data).expect("same shape")
    };
    let times = |a: &Tensor<T>, c: &Tensor<T>| -> Tensor<T> {
        let data = a.data().iter().zip(c.data()).map(|(&a, &c)| a * c).collect();
        Tensor::from_vec(a.shape(), data).expect("same shape")
    };
    for (i, (name, layer)) in net.layers.iter().enumerate().rev() {
        let a = &trace.acts[i];
        r = match layer {
            Layer::Linear(l) => {
                let z = l.forward_with(a, false)?;
                times(a, &l.transpose_apply(&stabilise(&z, &r))?)
            }
            Layer::Conv(l) => {
                let z = l.forward_with(a, false)?;
                times(a, &l.transpose_apply(a.shape(), &stabilise(&z, &r))?)
            }
            Layer::Pool(_) => {
                let win = trace.winners[i].as_deref().expect("pool records winners");
                MaxPool2d::backward(a.shape(), win, &r)?
            }
            Layer::Relu => r,
            Layer::Flatten => {
                let [c, _, h, w] = a.dims4()?;
                r.unflatten_spatial(c, h, w)?
            }
            Layer::ToSpatial => r.reshape(a.shape())?,
            Layer::Upsample(_) => {
                return Err(Error::UnsupportedExplanation(format!("LRP has no rule for layer `{name}`")));
            }
        };
    }
    Ok(r)
}

/// Sums a `[C, N, H, W]` batch over channels into per-sample `H × W` maps.
fn per_sample_maps<T: Real>(t: &Tensor<T>) -> Result<Vec<Vec<f32>>> {
    let [c, n, h, w] = t.dims4()?;
    let plane = h * w;
    let d = t.data();
    Ok((0..n)
        .map(|j| {
            (0..plane).map(|p| (0..c).fold(0.0f64, |s, ch| s + d[(ch * n + j) * plane + p].as_f64()) as f32).collect()
        })
        .collect())
}

fn cast_vec<T: Real>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.as_f64() as f32).collect()
}

/// Explains `classes[j]` for every `x` sample with `kind` (raw, unnormalized).
pub fn explain_tensor<T: Real>(
    net: &Sequential<T>,
    x: &Tensor<T>,
    classes: &[usize],
    class_count: usize,
    kind: ExplanationKind,
) -> Result<Vec<Explanation>> {
    let [_, n, h, w] = x.dims4()?;
    let maps = |kind, t: Tensor<T>| -> Result<Vec<Explanation>> {
        Ok(per_sample_maps(&t)?
            .into_iter()
            .zip(classes)
            .map(|(values, &c)| {
                Explanation::Map(ExplanationMap {
                    kind,
                    explained_class: c,
                    source_layer: None,
                    height: h,
                    width: w,
                    normalized: false,
                    values,
                })
            })
            .collect())
    };
    match kind {
        ExplanationKind::Gradient => maps(kind, gradient_batch(net, x, classes)?),
        ExplanationKind::GradInput => maps(kind, grad_input_batch(net, x, classes)?),
        ExplanationKind::Lrp => maps(kind, lrp_batch(net, x, classes, LRP_EPSILON)?),
        ExplanationKind::GradCam | ExplanationKind::PartialCam => {
            let parts = cam_parts(net, x, classes)?;
            let [k, _, ch, cw] = parts.dims();
            Ok((0..n)
                .map(|j| {
                    if kind == ExplanationKind::GradCam {
                        Explanation::Map(ExplanationMap {
                            kind,
                            explained_class: classes[j],
                            source_layer: Some(parts.layer.clone()),
                            height: ch,
                            width: cw,
                            normalized: false,
                            values: cast_vec(&parts.cam(j)),
                        })
                    } else {
                        Explanation::Stack(ExplanationStack {
                            kind,
                            explained_class: Some(classes[j]),
                            source_layer: Some(parts.layer.clone()),
                            depth: k,
                            height: ch,
                            width: cw,
                            normalized: false,
                            maps: cast_vec(&parts.partial(j)),
                        })
                    }
                })
                .collect())
        }
        ExplanationKind::SigmaCam => {
            let trace = net.forward_trace(x)?;
            let per_class =
                (0..class_count).map(|c| cam_parts_from_trace(net, &trace, &vec![c; n])).collect::<Result<Vec<_>>>()?;
            let [_, _, ch, cw] = per_class[0].dims();
            Ok((0..n)
                .map(|j| {
                    let mut stack = Vec::with_capacity(class_count * ch * cw);
                    for p in &per_class {
                        stack.extend(cast_vec(&p.cam(j)));
                    }
                    Explanation::Stack(ExplanationStack {
                        kind,
                        explained_class: None,
                        source_layer: Some(per_class[0].layer.clone()),
                        depth: class_count,
                        height: ch,
                        width: cw,
                        normalized: false,
                        maps: stack,
                    })
                })
                .collect())
        }
    }
}

/// Explains a batch of images with a classifier; chunked and optionally
/// parallel. Results depend only on the inputs, not on `mode`.
pub fn explain(
    model: &Classifier,
    images: &[&ImageTensor],
    classes: &[usize],
    kind: ExplanationKind,
    mode: Parallelism,
) -> Result<Vec<Explanation>> {
    if images.len() != classes.len() {
        return Err(Error::Shape(format!("{} images vs {} classes", images.len(), classes.len())));
    }
    let idx: Vec<usize> = (0..images.len()).collect();
    let parts = map_chunks(mode, &idx, INFER_CHUNK, |chunk| -> Result<Vec<Explanation>> {
        let imgs: Vec<&ImageTensor> = chunk.iter().map(|&i| images[i]).collect();
        let cls: Vec<usize> = chunk.iter().map(|&i| classes[i]).collect();
        for im in &imgs {
            if im.shape() != model.spec().input_shape {
                return Err(Error::Shape(format!(
                    "model expects {:?}, got {:?}",
                    model.spec().input_shape,
                    im.shape()
                )));
            }
        }
        explain_tensor(model.network(), &to_batch::<f32>(&imgs)?, &cls, model.class_count(), kind)
    });
    let mut out = Vec::with_capacity(images.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn one(model: &Classifier, image: &ImageTensor, class: usize, kind: ExplanationKind) -> Result<Explanation> {
    if class >= model.class_count() {
        return Err(Error::Invalid(format!("class {class} outside [0, {})", model.class_count())));
    }
    Ok(explain(model, &[image], &[class], kind, Parallelism::Sequential)?.remove(0))
}

fn expect_map(e: Explanation) -> ExplanationMap {
    match e {
        Explanation::Map(m) => m,
        Explanation::Stack(_) => unreachable!("map kinds yield maps"),
    }
}

fn expect_stack(e: Explanation) -> ExplanationStack {
    match e {
        Explanation::Stack(s) => s,
        Explanation::Map(_) => unreachable!("stack kinds yield stacks"),
    }
}

pub fn gradient_map(model: &Classifier, image: &ImageTensor, class: usize) -> Result<ExplanationMap> {
    one(model, image, class, ExplanationKind::Gradient).map(expect_map)
}

pub fn gradient_input_map(model: &Classifier, image: &ImageTensor, class: usize) -> Result<ExplanationMap> {
    one(model, image, class, ExplanationKind::GradInput).map(expect_map)
}

pub fn grad_cam(model: &Classifier, image: &ImageTensor, class: usize) -> Result<ExplanationMap> {
    one(model, image, class, ExplanationKind::GradCam).map(expect_map)
}

pub fn lrp_map(model: &Classifier, image: &ImageTensor, class: usize) -> Result<ExplanationMap> {
    one(model, image, class, ExplanationKind::Lrp).map(expect_map)
}

pub fn sigma_cam(model: &Classifier, image: &ImageTensor) -> Result<ExplanationStack> {
    one(model, image, 0, ExplanationKind::SigmaCam).map(expect_stack)
}

pub fn partial_cams(model: &Classifier, image: &ImageTensor, class: usize) -> Result<ExplanationStack> {
    one(model, image, class, ExplanationKind::PartialCam).map(expect_stack)
}
