//! Declarative layer lists for classifiers and inversion models, with shape
//! arithmetic and validation.

use serde::{Deserialize, Serialize};
use xaimi_nn::layers::{conv_out, conv_transpose_out};

use crate::data::DatasetProfile;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Pool,
    Fc,
    Upsample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softmax,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Channels for spatial layers, width for `fc`.
    pub out_channels: usize,
    pub activation: Activation,
    /// Encoder layer whose output is concatenated into this layer's input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bypass_link: Option<String>,
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, out: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv,
            kernel: 3,
            stride: 1,
            padding: 1,
            out_channels: out,
            activation: Activation::Relu,
            bypass_link: None,
        }
    }

    pub fn pool(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Pool,
            kernel: 2,
            stride: 2,
            padding: 0,
            out_channels: 0,
            activation: Activation::None,
            bypass_link: None,
        }
    }

    pub fn fc(name: impl Into<String>, out: usize, activation: Activation) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Fc,
            kernel: 0,
            stride: 0,
            padding: 0,
            out_channels: out,
            activation,
            bypass_link: None,
        }
    }

    pub fn upsample(name: impl Into<String>, out: usize, first: bool) -> Self {
        let (stride, padding) = if first { (1, 0) } else { (2, 1) };
        Self {
            name: name.into(),
            kind: LayerKind::Upsample,
            kernel: 4,
            stride,
            padding,
            out_channels: out,
            activation: Activation::Relu,
            bypass_link: None,
        }
    }

    fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }
}

/// Feature shape after a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureShape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl FeatureShape {
    pub fn size(&self) -> usize {
        match *self {
            FeatureShape::Spatial { h, w, c } => h * w * c,
            FeatureShape::Flat(f) => f,
        }
    }
}

fn spec_err(layer: &str, reason: impl Into<String>) -> Error {
    Error::Spec { layer: layer.to_string(), reason: reason.into() }
}

/// Shape after `layer` given `input`.
fn step(layer: &LayerSpec, input: FeatureShape) -> Result<FeatureShape> {
    let name = &layer.name;
    match (layer.kind, input) {
        (LayerKind::Conv, FeatureShape::Spatial { h, w, .. }) => {
            let oh = conv_out(h, layer.kernel, layer.stride, layer.padding);
            let ow = conv_out(w, layer.kernel, layer.stride, layer.padding);
            match (oh, ow) {
                (Some(h), Some(w)) if layer.out_channels > 0 => {
                    Ok(FeatureShape::Spatial { h, w, c: layer.out_channels })
                }
                _ => Err(spec_err(name, format!("kernel {} does not fit {h}×{w}", layer.kernel))),
            }
        }
        (LayerKind::Upsample, FeatureShape::Spatial { h, w, .. }) => {
            let oh = conv_transpose_out(h, layer.kernel, layer.stride, layer.padding);
            let ow = conv_transpose_out(w, layer.kernel, layer.stride, layer.padding);
            match (oh, ow) {
                (Some(h), Some(w)) if layer.out_channels > 0 => {
                    Ok(FeatureShape::Spatial { h, w, c: layer.out_channels })
                }
                _ => Err(spec_err(name, "transposed conv arithmetic fails")),
            }
        }
        (LayerKind::Pool, FeatureShape::Spatial { h, w, c }) => {
            if layer.kernel == 0 || layer.stride != layer.kernel || h < layer.kernel || w < layer.kernel {
                return Err(spec_err(name, format!("pool {}×{} does not fit {h}×{w}", layer.kernel, layer.stride)));
            }
            if h % layer.kernel != 0 || w % layer.kernel != 0 {
                return Err(spec_err(name, format!("{h}×{w} not divisible by pool {}", layer.kernel)));
            }
            Ok(FeatureShape::Spatial { h: h / layer.kernel, w: w / layer.kernel, c })
        }
        (LayerKind::Fc, _) if layer.out_channels > 0 => Ok(FeatureShape::Flat(layer.out_channels)),
        (LayerKind::Fc, _) => Err(spec_err(name, "fc width must be positive")),
        (kind, FeatureShape::Flat(_)) => Err(spec_err(name, format!("{kind:?} needs a spatial input"))),
    }
}

/// Classifier architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// `(H, W, C)`
    pub input_shape: (usize, usize, usize),
    pub class_count: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Validates shape arithmetic and returns the output shape of every layer.
    pub fn validate(&self) -> Result<Vec<FeatureShape>> {
        let (h, w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(spec_err("input", "degenerate input shape"));
        }
        if self.class_count < 2 {
            return Err(spec_err("input", "class_count must be ≥ 2"));
        }
        let mut cur = FeatureShape::Spatial { h, w, c };
        let mut out = Vec::with_capacity(self.layers.len());
        let mut seen_fc = false;
        for l in &self.layers {
            if l.kind == LayerKind::Upsample {
                return Err(spec_err(&l.name, "upsample layers belong to inversion models"));
            }
            if l.bypass_link.is_some() {
                return Err(spec_err(&l.name, "bypass links belong to inversion models"));
            }
            if seen_fc && l.kind != LayerKind::Fc {
                return Err(spec_err(&l.name, "spatial layer after fc"));
            }
            seen_fc |= l.kind == LayerKind::Fc;
            cur = step(l, cur)?;
            out.push(cur);
        }
        match self.layers.last() {
            Some(l) if l.kind == LayerKind::Fc && l.out_channels == self.class_count => Ok(out),
            Some(l) => Err(spec_err(
                &l.name,
                format!("final layer must be fc of width {} (got {:?} {})", self.class_count, l.kind, l.out_channels),
            )),
            None => Err(spec_err("output", "empty layer list")),
        }
    }

    /// MNIST target: conv128 → pool → conv256 → pool → fc512 → fc|C|.
    pub fn mnist_target(class_count: usize) -> Self {
        Self {
            name: "mnist_target".into(),
            input_shape: (32, 32, 1),
            class_count,
            layers: vec![
                LayerSpec::conv("conv1", 128),
                LayerSpec::pool("pool1"),
                LayerSpec::conv("conv2", 256),
                LayerSpec::pool("pool2"),
                LayerSpec::fc("fc1", 512, Activation::Relu),
                LayerSpec::fc("fc2", class_count, Activation::Softmax),
            ],
        }
    }

    /// 128×128 face target (three conv/pool blocks, fc512).
    pub fn icv_target(class_count: usize) -> Self {
        Self {
            name: "icv_target".into(),
            input_shape: (128, 128, 1),
            class_count,
            layers: vec![
                LayerSpec::conv("conv1", 128),
                LayerSpec::pool("pool1"),
                LayerSpec::conv("conv2", 256),
                LayerSpec::pool("pool2"),
                LayerSpec::conv("conv3", 512),
                LayerSpec::pool("pool3"),
                LayerSpec::fc("fc1", 512, Activation::Relu),
                LayerSpec::fc("fc2", class_count, Activation::Softmax),
            ],
        }
    }

    /// 256×256 face target (four conv/pool blocks, fc1024).
    pub fn celeba_target(class_count: usize) -> Self {
        Self {
            name: "celeba_target".into(),
            input_shape: (256, 256, 1),
            class_count,
            layers: vec![
                LayerSpec::conv("conv1", 128),
                LayerSpec::pool("pool1"),
                LayerSpec::conv("conv2", 256),
                LayerSpec::pool("pool2"),
                LayerSpec::conv("conv3", 512),
                LayerSpec::pool("pool3"),
                LayerSpec::conv("conv4", 1024),
                LayerSpec::pool("pool4"),
                LayerSpec::fc("fc1", 1024, Activation::Relu),
                LayerSpec::fc("fc2", class_count, Activation::Softmax),
            ],
        }
    }

    /// Built-in target architecture for a dataset profile.
    pub fn target_for(profile: &DatasetProfile) -> Result<Self> {
        let mut spec = match profile.image_size {
            (32, 32) => Self::mnist_target(profile.class_count),
            (128, 128) => Self::icv_target(profile.class_count),
            (256, 256) => Self::celeba_target(profile.class_count),
            (h, w) => return Err(Error::Config(format!("no built-in target architecture for {h}×{w}"))),
        };
        spec.input_shape.2 = profile.channels;
        Ok(spec)
    }

    /// Divides every hidden width by `divisor` (min 1); the output layer keeps
    /// `|C|`.
    pub fn scaled(mut self, divisor: usize) -> Self {
        if divisor > 1 {
            let last = self.layers.len().saturating_sub(1);
            for (i, l) in self.layers.iter_mut().enumerate() {
                if i != last && l.out_channels > 0 {
                    l.out_channels = (l.out_channels / divisor).max(1);
                }
            }
            self.name = format!("{}_div{divisor}", self.name);
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionMethod {
    PredictionOnly,
    Flatten,
    Cnn,
    Unet,
    FlattenUnet,
}

impl InversionMethod {
    pub const ALL: [InversionMethod; 5] = [
        InversionMethod::PredictionOnly,
        InversionMethod::Flatten,
        InversionMethod::Cnn,
        InversionMethod::Unet,
        InversionMethod::FlattenUnet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InversionMethod::PredictionOnly => "prediction_only",
            InversionMethod::Flatten => "flatten",
            InversionMethod::Cnn => "cnn",
            InversionMethod::Unet => "unet",
            InversionMethod::FlattenUnet => "flatten_unet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown inversion method `{s}`")))
    }

    pub fn needs_explanation(self) -> bool {
        self != InversionMethod::PredictionOnly
    }

    pub fn flattens(self) -> bool {
        matches!(self, InversionMethod::Flatten | InversionMethod::FlattenUnet)
    }

    pub fn encodes(self) -> bool {
        matches!(self, InversionMethod::Cnn | InversionMethod::Unet | InversionMethod::FlattenUnet)
    }

    pub fn bypasses(self) -> bool {
        matches!(self, InversionMethod::Unet | InversionMethod::FlattenUnet)
    }
}

/// Shape of the explanation input: `depth` maps of `height × width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationShape {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl ExplanationShape {
    pub fn map(height: usize, width: usize) -> Self {
        Self { depth: 1, height, width }
    }

    pub fn len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Width of the embedding produced by an explanation encoder.
pub const EMBEDDING_WIDTH: usize = 64;

/// Inversion model architecture: optional explanation encoder, fusion fc and
/// transposed-conv decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionSpec {
    pub method: InversionMethod,
    pub class_count: usize,
    /// `(H, W, C)` of the reconstruction.
    pub output_shape: (usize, usize, usize),
    pub explanation: Option<ExplanationShape>,
    /// conv/pool blocks ending in the embedding fc.
    pub encoder: Vec<LayerSpec>,
    /// Fully connected layer over the concatenated inputs.
    pub fusion: LayerSpec,
    /// Alternating upsample / conv layers.
    pub decoder: Vec<LayerSpec>,
}

/// Channel width at decoder resolution `res` (4, 8, 16, …) for an output of
/// `size`: 1024 at 4×4 halving per doubling, image channels at full size.
fn decoder_channels(res: usize, size: usize, out_channels: usize, divisor: usize) -> usize {
    if res == size {
        return out_channels;
    }
    let level = (res / 4).trailing_zeros();
    ((1024usize >> level) / divisor.max(1)).max(1)
}

impl InversionSpec {
    /// Built-in architecture for `method` on a square power-of-two profile.
    ///
    /// The decoder seeds a 4×4 map from the fused vector and doubles until
    /// the profile size; smaller outputs simply have fewer stages. The
    /// encoder mirrors the decoder's width at each resolution, pools down to
    /// 2×2 and ends in a 64-wide fc.
    pub fn build(
        method: InversionMethod,
        profile: &DatasetProfile,
        explanation: Option<ExplanationShape>,
        divisor: usize,
    ) -> Result<Self> {
        let (size, w) = profile.image_size;
        if size != w || size < 4 || !size.is_power_of_two() {
            return Err(Error::Config(format!("no built-in inversion decoder for {size}×{w}")));
        }
        let ch = profile.channels;
        let explanation = if method.needs_explanation() {
            Some(
                explanation
                    .ok_or_else(|| Error::Config(format!("{} requires an explanation input", method.as_str())))?,
            )
        } else {
            None
        };
        let c = profile.class_count;

        let mut encoder = Vec::new();
        if method.encodes() {
            let e = explanation.expect("checked above");
            if e.height != e.width || e.height < 4 || !e.height.is_power_of_two() || e.height > size {
                return Err(Error::Shape(format!("explanation {}×{} cannot feed the encoder", e.height, e.width)));
            }
            let mut res = e.height;
            let mut i = 1;
            while res >= 4 {
                encoder.push(LayerSpec::conv(format!("enc_conv{i}"), decoder_channels(res, size, ch, divisor)));
                encoder.push(LayerSpec::pool(format!("enc_pool{i}")));
                res /= 2;
                i += 1;
            }
            encoder.push(LayerSpec::fc("enc_fc", EMBEDDING_WIDTH, Activation::Relu));
        }

        let mut fusion_width = c;
        if method.encodes() {
            fusion_width += EMBEDDING_WIDTH;
        }
        if method.flattens() {
            let e = explanation.expect("checked above");
            fusion_width += e.height * e.width;
        }
        let fusion = LayerSpec::fc("fusion", fusion_width, Activation::None);

        let mut decoder = Vec::new();
        let mut res = 4;
        let mut i = 1;
        while res <= size {
            let out = decoder_channels(res, size, ch, divisor);
            let mut up = LayerSpec::upsample(format!("dec_up{i}"), out, i == 1);
            let mut conv = LayerSpec::conv(format!("dec_conv{i}"), out);
            if res == size {
                // a ReLU on the image-channel map can silence the whole decoder
                up = up.with_activation(Activation::None);
                conv = conv.with_activation(Activation::None);
            }
            decoder.push(up);
            if method.bypasses() {
                let e = explanation.expect("checked above");
                if res <= e.height {
                    let level = (e.height / res).trailing_zeros() + 1;
                    conv.bypass_link = Some(format!("enc_conv{level}"));
                }
            }
            decoder.push(conv);
            res *= 2;
            i += 1;
        }

        let spec =
            Self { method, class_count: c, output_shape: (size, size, ch), explanation, encoder, fusion, decoder };
        spec.validate()?;
        Ok(spec)
    }

    /// Width of the concatenated fusion input.
    pub fn fusion_input_width(&self) -> usize {
        let mut w = self.class_count;
        if self.method.encodes() {
            w += self.encoder.last().map(|l| l.out_channels).unwrap_or(0);
        }
        if self.method.flattens() {
            w += self.explanation.map(|e| e.len()).unwrap_or(0);
        }
        w
    }

    /// Validates every shape and link; returns `(encoder, fusion, decoder)`
    /// output shapes.
    pub fn validate(&self) -> Result<(Vec<FeatureShape>, FeatureShape, Vec<FeatureShape>)> {
        let m = self.method;
        if m.needs_explanation() != self.explanation.is_some() {
            return Err(spec_err("input", format!("{} explanation input mismatch", m.as_str())));
        }
        if m.encodes() == self.encoder.is_empty() {
            return Err(spec_err("encoder", format!("{} encoder presence mismatch", m.as_str())));
        }
        let mut enc_shapes = Vec::new();
        if let Some(e) = self.explanation.filter(|_| m.encodes()) {
            let mut cur = FeatureShape::Spatial { h: e.height, w: e.width, c: e.depth };
            for (i, l) in self.encoder.iter().enumerate() {
                if l.kind == LayerKind::Upsample {
                    return Err(spec_err(&l.name, "upsample in encoder"));
                }
                if l.kind == LayerKind::Fc && i + 1 != self.encoder.len() {
                    return Err(spec_err(&l.name, "encoder fc must be last"));
                }
                cur = step(l, cur)?;
                enc_shapes.push(cur);
            }
            if !matches!(cur, FeatureShape::Flat(_)) {
                return Err(spec_err("encoder", "encoder must end in an fc embedding"));
            }
        }
        if self.fusion.kind != LayerKind::Fc {
            return Err(spec_err(&self.fusion.name, "fusion layer must be fc"));
        }
        let fusion_shape = FeatureShape::Flat(self.fusion.out_channels);
        let mut cur = FeatureShape::Spatial { h: 1, w: 1, c: self.fusion.out_channels };
        let mut dec_shapes = Vec::new();
        let mut links = 0;
        for l in &self.decoder {
            if l.kind == LayerKind::Pool || l.kind == LayerKind::Fc {
                return Err(spec_err(&l.name, "decoder holds only upsample and conv layers"));
            }
            let next = step(l, cur)?;
            if let Some(link) = &l.bypass_link {
                if l.kind != LayerKind::Conv {
                    return Err(spec_err(&l.name, "bypass links attach to conv layers"));
                }
                let pos = self
                    .encoder
                    .iter()
                    .position(|e| &e.name == link && e.kind == LayerKind::Conv)
                    .ok_or_else(|| spec_err(&l.name, format!("bypass link `{link}` names no encoder conv")))?;
                let (FeatureShape::Spatial { h: eh, w: ew, .. }, FeatureShape::Spatial { h, w, .. }) =
                    (enc_shapes[pos], cur)
                else {
                    return Err(spec_err(&l.name, "bypass between non-spatial layers"));
                };
                if (eh, ew) != (h, w) {
                    return Err(spec_err(&l.name, format!("bypass from {link} ({eh}×{ew}) into a {h}×{w} layer")));
                }
                links += 1;
            }
            cur = next;
            dec_shapes.push(cur);
        }
        if m.bypasses() && links == 0 {
            return Err(spec_err("decoder", format!("{} requires at least one bypass link", m.as_str())));
        }
        if !m.bypasses() && links > 0 {
            return Err(spec_err("decoder", format!("{} takes no bypass links", m.as_str())));
        }
        let (h, w, c) = self.output_shape;
        if cur != (FeatureShape::Spatial { h, w, c }) {
            return Err(spec_err(
                self.decoder.last().map(|l| l.name.as_str()).unwrap_or("decoder"),
                format!("decoder ends at {cur:?}, expected {h}×{w}×{c}"),
            ));
        }
        Ok((enc_shapes, fusion_shape, dec_shapes))
    }
}
