//! Sequential networks with recorded traces for backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::layers::{relu, relu_backward, Conv2d, ConvTranspose2d, Linear, MaxPool2d};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Upsample(ConvTranspose2d<T>),
    Linear(Linear<T>),
    Pool(MaxPool2d),
    Relu,
    /// `[C, N, H, W]` → `[C·H·W, N]`
    Flatten,
    /// `[F, N]` → `[F, N, 1, 1]`
    ToSpatial,
}

impl<T: Real> Layer<T> {
    pub fn num_params(&self) -> usize {
        match self {
            Layer::Conv(l) => l.num_params(),
            Layer::Upsample(l) => l.num_params(),
            Layer::Linear(l) => l.num_params(),
            _ => 0,
        }
    }

    pub fn params(&self) -> Option<(&[T], &[T])> {
        match self {
            Layer::Conv(l) => Some((&l.weight, &l.bias)),
            Layer::Upsample(l) => Some((&l.weight, &l.bias)),
            Layer::Linear(l) => Some((&l.weight, &l.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut [T], &mut [T])> {
        match self {
            Layer::Conv(l) => Some((&mut l.weight, &mut l.bias)),
            Layer::Upsample(l) => Some((&mut l.weight, &mut l.bias)),
            Layer::Linear(l) => Some((&mut l.weight, &mut l.bias)),
            _ => None,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Vec<u32>>)> {
        Ok(match self {
            Layer::Conv(l) => (l.forward(x)?, None),
            Layer::Upsample(l) => (l.forward(x)?, None),
            Layer::Linear(l) => (l.forward(x)?, None),
            Layer::Pool(p) => {
                let (y, idx) = p.forward(x)?;
                (y, Some(idx))
            }
            Layer::Relu => (relu(x), None),
            Layer::Flatten => (x.flatten_spatial()?, None),
            Layer::ToSpatial => {
                let [f, n] = x.dims2()?;
                (x.clone().reshape(&[f, n, 1, 1])?, None)
            }
        })
    }

    /// Backward through one layer given its input `x`, output `y` and
    /// pooling winners.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        winners: Option<&[u32]>,
        grad_out: &Tensor<T>,
        grad: Option<&mut [T]>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        match self {
            Layer::Conv(l) => l.backward(x, grad_out, grad, need_dx),
            Layer::Upsample(l) => l.backward(x, grad_out, grad, need_dx),
            Layer::Linear(l) => l.backward(x, grad_out, grad, need_dx),
            _ if !need_dx => Ok(None),
            Layer::Pool(_) => {
                let w = winners.ok_or_else(|| NnError::Shape("missing pool winners".into()))?;
                Ok(Some(MaxPool2d::backward(x.shape(), w, grad_out)?))
            }
            Layer::Relu => Ok(Some(relu_backward(y, grad_out))),
            Layer::Flatten => {
                let [c, _, h, w] = x.dims4()?;
                Ok(Some(grad_out.unflatten_spatial(c, h, w)?))
            }
            Layer::ToSpatial => Ok(Some(grad_out.clone().reshape(x.shape())?)),
        }
    }

    pub fn cast<U: Real>(&self) -> Layer<U> {
        fn c<A: Real, B: Real>(v: &[A]) -> Vec<B> {
            v.iter().map(|&x| B::from_f64_lossy(x.as_f64())).collect()
        }
        match self {
            Layer::Conv(l) => Layer::Conv(Conv2d {
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                kernel: l.kernel,
                stride: l.stride,
                padding: l.padding,
                weight: c(&l.weight),
                bias: c(&l.bias),
            }),
            Layer::Upsample(l) => Layer::Upsample(ConvTranspose2d {
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                kernel: l.kernel,
                stride: l.stride,
                padding: l.padding,
                weight: c(&l.weight),
                bias: c(&l.bias),
            }),
            Layer::Linear(l) => Layer::Linear(Linear {
                in_features: l.in_features,
                out_features: l.out_features,
                weight: c(&l.weight),
                bias: c(&l.bias),
            }),
            Layer::Pool(p) => Layer::Pool(p.clone()),
            Layer::Relu => Layer::Relu,
            Layer::Flatten => Layer::Flatten,
            Layer::ToSpatial => Layer::ToSpatial,
        }
    }
}

/// Everything a forward pass produced: `acts[i]` is the input of layer `i`
/// and `acts[len]` is the network output.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub acts: Vec<Tensor<T>>,
    pub winners: Vec<Option<Vec<u32>>>,
}

impl<T> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("trace holds at least the input")
    }
}

/// Named sequential stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequential<T> {
    pub layers: Vec<(String, Layer<T>)>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<(String, Layer<T>)>) -> Self {
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, i: usize) -> &Layer<T> {
        &self.layers[i].1
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for (_, l) in &self.layers {
            cur = l.forward(&cur)?.0;
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<Trace<T>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut winners = Vec::with_capacity(self.layers.len());
        acts.push(x.clone());
        for (_, l) in &self.layers {
            let (y, w) = l.forward(acts.last().expect("non-empty"))?;
            acts.push(y);
            winners.push(w);
        }
        Ok(Trace { acts, winners })
    }

    /// Propagates `grad_out` (w.r.t. the output) down to `acts[stop_at]`.
    ///
    /// Parameter gradients of layers `stop_at..` accumulate into `grads`
    /// (a flat buffer laid out like [`Sequential::visit_params`]). Returns the
    /// gradient w.r.t. `acts[stop_at]` when `need_input_grad` is set.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        grad_out: Tensor<T>,
        grads: Option<&mut [T]>,
        stop_at: usize,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        self.backward_with_taps(trace, grad_out, &[], grads, stop_at, need_input_grad)
    }

    /// Like [`Sequential::backward`], additionally adding `taps[j].1` to the
    /// running gradient when it reaches activation `acts[taps[j].0]`. Used for
    /// skip connections that read intermediate activations.
    pub fn backward_with_taps(
        &self,
        trace: &Trace<T>,
        grad_out: Tensor<T>,
        taps: &[(usize, &Tensor<T>)],
        mut grads: Option<&mut [T]>,
        stop_at: usize,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let offsets = self.param_offsets();
        let mut g = grad_out;
        for i in (stop_at..self.layers.len()).rev() {
            for (at, extra) in taps {
                if *at == i + 1 {
                    if extra.shape() != g.shape() {
                        return Err(NnError::Shape(format!("tap at {at}: {:?} vs {:?}", extra.shape(), g.shape())));
                    }
                    g.add_assign(extra);
                }
            }
            let layer = &self.layers[i].1;
            let need_dx = i > stop_at || need_input_grad;
            let slot = match grads.as_deref_mut() {
                Some(buf) if layer.num_params() > 0 => Some(&mut buf[offsets[i]..offsets[i] + layer.num_params()]),
                _ => None,
            };
            let dx =
                layer.backward(&trace.acts[i], &trace.acts[i + 1], trace.winners[i].as_deref(), &g, slot, need_dx)?;
            match dx {
                Some(d) => g = d,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }

    pub fn param_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|(_, l)| {
                let o = off;
                off += l.num_params();
                o
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Sequential<U> {
        Sequential { layers: self.layers.iter().map(|(n, l)| (n.clone(), l.cast())).collect() }
    }
}

/// Flat parameter access shared by optimizers, checkpoints and gradient
/// buffers. Visiting order defines the flat layout: per parametric layer,
/// weight then bias.
pub trait Params<T: Real> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[T]));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }

    fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params(&mut |_, p| out.extend_from_slice(p));
        out
    }

    fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(NnError::ParamCount { expected, got: flat.len() });
        }
        let mut off = 0;
        self.visit_params_mut(&mut |_, p| {
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        });
        Ok(())
    }
}

impl<T: Real> Params<T> for Sequential<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[T])) {
        for (name, l) in &self.layers {
            if let Some((w, b)) = l.params() {
                f(&format!("{name}.weight"), w);
                f(&format!("{name}.bias"), b);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        for (name, l) in &mut self.layers {
            if let Some((w, b)) = l.params_mut() {
                f(&format!("{name}.weight"), w);
                f(&format!("{name}.bias"), b);
            }
        }
    }
}

/// Convenience constructors used by model builders.
pub fn conv<T: Real, R: Rng>(rng: &mut R, cin: usize, cout: usize, k: usize, s: usize, p: usize) -> Layer<T> {
    Layer::Conv(Conv2d::new(rng, cin, cout, k, s, p))
}

pub fn upsample<T: Real, R: Rng>(rng: &mut R, cin: usize, cout: usize, k: usize, s: usize, p: usize) -> Layer<T> {
    Layer::Upsample(ConvTranspose2d::new(rng, cin, cout, k, s, p))
}

pub fn linear<T: Real, R: Rng>(rng: &mut R, fin: usize, fout: usize) -> Layer<T> {
    Layer::Linear(Linear::new(rng, fin, fout))
}
