//! Layer primitives with hand-written backward passes.
//!
//! Every parametric layer stores `weight` then `bias`; gradient buffers passed
//! to `backward` follow the same order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// Output extent of a strided convolution.
pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output extent of a transposed convolution.
pub fn conv_transpose_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    ((size.checked_sub(1)? * stride) + k).checked_sub(2 * pad)
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    n: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Lowers `[C, N, H, W]` patches to a `(C·k·k) × (N·OH·OW)` matrix.
fn im2col<T: Real>(x: &[T], g: Geom) -> Vec<T> {
    let cols = g.cols();
    let mut out = vec![T::zero(); g.rows() * cols];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let plane = &x[(c * g.n + n) * g.h * g.w..(c * g.n + n + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let base = (n * g.oh + oy) * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto `[C, N, H, W]`.
fn col2im<T: Real>(cols_data: &[T], g: Geom) -> Vec<T> {
    let cols = g.cols();
    let mut out = vec![T::zero(); g.c * g.n * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let plane = &mut out[(c * g.n + n) * g.h * g.w..(c * g.n + n + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (n * g.oh + oy) * g.ow;
                        let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn he_uniform<T: Real, R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| T::from_f64_lossy(rng.random_range(-bound..bound))).collect()
}

fn add_bias_rows<T: Real>(data: &mut [T], bias: &[T]) {
    let per = data.len() / bias.len();
    for (row, &b) in data.chunks_mut(per).zip(bias) {
        for v in row {
            *v += b;
        }
    }
}

fn accumulate_bias_grad<T: Real>(grad_out: &[T], db: &mut [T]) {
    let per = grad_out.len() / db.len();
    for (row, d) in grad_out.chunks(per).zip(db.iter_mut()) {
        *d += row.iter().copied().sum::<T>();
    }
}

/// 2-D convolution, square kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out × (in·k·k)`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: he_uniform(rng, out_channels * fan_in, fan_in),
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn geom(&self, x: &Tensor<T>) -> Result<Geom> {
        let [c, n, h, w] = x.dims4()?;
        if c != self.in_channels {
            return Err(NnError::Shape(format!("conv expects {} input channels, got {c}", self.in_channels)));
        }
        let bad = || NnError::Shape(format!("conv kernel {} does not fit {h}×{w}", self.kernel));
        let oh = conv_out(h, self.kernel, self.stride, self.padding).ok_or_else(bad)?;
        let ow = conv_out(w, self.kernel, self.stride, self.padding).ok_or_else(bad)?;
        Ok(Geom { c, n, h, w, k: self.kernel, stride: self.stride, pad: self.padding, oh, ow })
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            conv_out(h, self.kernel, self.stride, self.padding)?,
            conv_out(w, self.kernel, self.stride, self.padding)?,
        ))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(x, true)
    }

    /// Forward pass, optionally without the bias term.
    pub fn forward_with(&self, x: &Tensor<T>, with_bias: bool) -> Result<Tensor<T>> {
        let g = self.geom(x)?;
        let cols = im2col(x.data(), g);
        let mut out = vec![T::zero(); self.out_channels * g.cols()];
        gemm(false, false, self.out_channels, g.cols(), g.rows(), T::one(), &self.weight, &cols, T::zero(), &mut out);
        if with_bias {
            add_bias_rows(&mut out, &self.bias);
        }
        Tensor::from_vec(&[self.out_channels, g.n, g.oh, g.ow], out)
    }

    /// Accumulates parameter gradients into `grad` (weight then bias) and
    /// returns the input gradient when `need_dx` is set.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        grad: Option<&mut [T]>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let g = self.geom(x)?;
        let go = grad_out.data();
        if let Some(grad) = grad {
            let cols = im2col(x.data(), g);
            let (dw, db) = grad.split_at_mut(self.weight.len());
            gemm(false, true, self.out_channels, g.rows(), g.cols(), T::one(), go, &cols, T::one(), dw);
            accumulate_bias_grad(go, db);
        }
        if !need_dx {
            return Ok(None);
        }
        let mut dcols = vec![T::zero(); g.rows() * g.cols()];
        gemm(true, false, g.rows(), g.cols(), self.out_channels, T::one(), &self.weight, go, T::zero(), &mut dcols);
        Ok(Some(Tensor::from_vec(x.shape(), col2im(&dcols, g))?))
    }

    /// `Wᵀ`-propagation of an output-shaped signal back to input shape
    /// (the input-gradient map for an arbitrary upstream signal).
    pub fn transpose_apply(&self, x_shape: &[usize], signal: &Tensor<T>) -> Result<Tensor<T>> {
        let probe = Tensor::zeros(x_shape);
        let g = self.geom(&probe)?;
        let mut dcols = vec![T::zero(); g.rows() * g.cols()];
        gemm(
            true,
            false,
            g.rows(),
            g.cols(),
            self.out_channels,
            T::one(),
            &self.weight,
            signal.data(),
            T::zero(),
            &mut dcols,
        );
        Tensor::from_vec(x_shape, col2im(&dcols, g))
    }
}

/// Transposed convolution (fractionally strided upsampling), square kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvTranspose2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `in × (out·k·k)`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let taps = kernel.div_ceil(stride.max(1));
        let fan_in = in_channels * taps * taps;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: he_uniform(rng, in_channels * out_channels * kernel * kernel, fan_in),
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            conv_transpose_out(h, self.kernel, self.stride, self.padding)?,
            conv_transpose_out(w, self.kernel, self.stride, self.padding)?,
        ))
    }

    /// Geometry of the adjoint convolution (output grid → input grid).
    fn geom(&self, x: &Tensor<T>) -> Result<Geom> {
        let [c, n, h, w] = x.dims4()?;
        if c != self.in_channels {
            return Err(NnError::Shape(format!("upsample expects {} input channels, got {c}", self.in_channels)));
        }
        let (oh, ow) = self.output_hw(h, w).ok_or_else(|| NnError::Shape(format!("upsample does not fit {h}×{w}")))?;
        Ok(Geom {
            c: self.out_channels,
            n,
            h: oh,
            w: ow,
            k: self.kernel,
            stride: self.stride,
            pad: self.padding,
            oh: h,
            ow: w,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geom(x)?;
        let mut cols = vec![T::zero(); g.rows() * g.cols()];
        gemm(true, false, g.rows(), g.cols(), self.in_channels, T::one(), &self.weight, x.data(), T::zero(), &mut cols);
        let mut out = col2im(&cols, g);
        add_bias_rows(&mut out, &self.bias);
        Tensor::from_vec(&[self.out_channels, g.n, g.h, g.w], out)
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        grad: Option<&mut [T]>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let g = self.geom(x)?;
        let dcols = im2col(grad_out.data(), g);
        if let Some(grad) = grad {
            let (dw, db) = grad.split_at_mut(self.weight.len());
            gemm(false, true, self.in_channels, g.rows(), g.cols(), T::one(), x.data(), &dcols, T::one(), dw);
            accumulate_bias_grad(grad_out.data(), db);
        }
        if !need_dx {
            return Ok(None);
        }
        let mut dx = vec![T::zero(); x.len()];
        gemm(false, false, self.in_channels, g.cols(), g.rows(), T::one(), &self.weight, &dcols, T::zero(), &mut dx);
        Ok(Some(Tensor::from_vec(x.shape(), dx)?))
    }
}

/// Fully connected layer on `[F, N]` activations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `out × in`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(rng: &mut R, in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: he_uniform(rng, in_features * out_features, in_features),
            bias: vec![T::zero(); out_features],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn check(&self, x: &Tensor<T>) -> Result<usize> {
        let [f, n] = x.dims2()?;
        if f != self.in_features {
            return Err(NnError::Shape(format!("fc expects {} features, got {f}", self.in_features)));
        }
        Ok(n)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(x, true)
    }

    pub fn forward_with(&self, x: &Tensor<T>, with_bias: bool) -> Result<Tensor<T>> {
        let n = self.check(x)?;
        let mut out = vec![T::zero(); self.out_features * n];
        gemm(
            false,
            false,
            self.out_features,
            n,
            self.in_features,
            T::one(),
            &self.weight,
            x.data(),
            T::zero(),
            &mut out,
        );
        if with_bias {
            add_bias_rows(&mut out, &self.bias);
        }
        Tensor::from_vec(&[self.out_features, n], out)
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        grad: Option<&mut [T]>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        let n = self.check(x)?;
        if let Some(grad) = grad {
            let (dw, db) = grad.split_at_mut(self.weight.len());
            gemm(
                false,
                true,
                self.out_features,
                self.in_features,
                n,
                T::one(),
                grad_out.data(),
                x.data(),
                T::one(),
                dw,
            );
            accumulate_bias_grad(grad_out.data(), db);
        }
        if !need_dx {
            return Ok(None);
        }
        Ok(Some(self.transpose_apply(grad_out)?))
    }

    pub fn transpose_apply(&self, signal: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, n] = signal.dims2()?;
        let mut dx = vec![T::zero(); self.in_features * n];
        gemm(
            true,
            false,
            self.in_features,
            n,
            self.out_features,
            T::one(),
            &self.weight,
            signal.data(),
            T::zero(),
            &mut dx,
        );
        Tensor::from_vec(&[self.in_features, n], dx)
    }
}

/// 2×2 (or k×k, stride k) max pooling. Ties resolve to the first element in
/// row-major window order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxPool2d {
    pub kernel: usize,
}

impl MaxPool2d {
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.kernel == 0 || h < self.kernel || w < self.kernel {
            return None;
        }
        Some((h / self.kernel, w / self.kernel))
    }

    /// Returns the pooled tensor and the flat input index of each winner.
    pub fn forward<T: Real>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
        let [c, n, h, w] = x.dims4()?;
        let k = self.kernel;
        let (oh, ow) = self.output_hw(h, w).ok_or_else(|| NnError::Shape(format!("pool {k} does not fit {h}×{w}")))?;
        let xd = x.data();
        let mut out = Vec::with_capacity(c * n * oh * ow);
        let mut idx = Vec::with_capacity(c * n * oh * ow);
        for plane in 0..c * n {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * k + dy) * w + ox * k + dx;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xd[best]);
                    idx.push(best as u32);
                }
            }
        }
        Ok((Tensor::from_vec(&[c, n, oh, ow], out)?, idx))
    }

    /// Routes the output signal to the recorded winners.
    pub fn backward<T: Real>(input_shape: &[usize], winners: &[u32], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut dx = Tensor::zeros(input_shape);
        let d = dx.data_mut();
        for (&i, &g) in winners.iter().zip(grad_out.data()) {
            d[i as usize] += g;
        }
        Ok(dx)
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through ReLU given its output.
pub fn relu_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = y.data().iter().zip(grad_out.data()).map(|(&a, &g)| if a > T::zero() { g } else { T::zero() }).collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Direct nested-loop convolution on [C, N, H, W].
    fn naive_conv(l: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [c, n, h, w] = x.dims4().unwrap();
        let (oh, ow) = l.output_hw(h, w).unwrap();
        let k = l.kernel;
        let mut out = Tensor::zeros(&[l.out_channels, n, oh, ow]);
        for o in 0..l.out_channels {
            for s in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = l.bias[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * l.stride + ky) as isize - l.padding as isize;
                                    let ix = (ox * l.stride + kx) as isize - l.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((ci * n + s) * h + iy as usize) * w + ix as usize];
                                    acc += l.weight[((o * c + ci) * k + ky) * k + kx] * xv;
                                }
                            }
                        }
                        out.data_mut()[((o * n + s) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let l = Conv2d::<f64>::new(&mut rng, 3, 4, 3, stride, pad);
            let mut l = l;
            l.bias = vec![0.1, -0.2, 0.3, 0.0];
            let x = rand_tensor(&mut rng, &[3, 2, 5, 6]);
            let got = l.forward(&x).unwrap();
            let want = naive_conv(&l, &x);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_input_gradient_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = Conv2d::<f64>::new(&mut rng, 2, 3, 3, 2, 1);
        let x = rand_tensor(&mut rng, &[2, 2, 6, 6]);
        let mut l0 = l.clone();
        l0.bias.iter_mut().for_each(|b| *b = 0.0);
        let y = l0.forward(&x).unwrap();
        let g = rand_tensor(&mut rng, y.shape());
        let dx = l0.backward(&x, &g, None, true).unwrap().unwrap();
        // <conv(x), g> == <x, convᵀ(g)>
        assert!((dot(&y, &g) - dot(&x, &dx)).abs() < 1e-10);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let up = ConvTranspose2d::<f64>::new(&mut rng, 3, 2, 4, 2, 1);
        let x = rand_tensor(&mut rng, &[3, 2, 4, 4]);
        let y = up.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2, 8, 8]);
        let conv = Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: 4,
            stride: 2,
            padding: 1,
            weight: up.weight.clone(),
            bias: vec![0.0; 3],
        };
        let z = rand_tensor(&mut rng, &[2, 2, 8, 8]);
        let cz = conv.forward(&z).unwrap();
        assert!((dot(&y, &z) - dot(&x, &cz)).abs() < 1e-10);
    }

    #[test]
    fn upsample_from_single_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let up = ConvTranspose2d::<f32>::new(&mut rng, 5, 7, 4, 1, 0);
        let x = Tensor::zeros(&[5, 3, 1, 1]);
        assert_eq!(up.forward(&x).unwrap().shape(), &[7, 3, 4, 4]);
    }

    #[test]
    fn pool_picks_first_max_on_ties() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f32, 1.0, 0.0, 1.0]).unwrap();
        let (y, idx) = MaxPool2d { kernel: 2 }.forward(&x).unwrap();
        assert_eq!(y.data(), &[1.0]);
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn linear_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = Linear::<f64>::new(&mut rng, 4, 3);
        let x = rand_tensor(&mut rng, &[4, 2]);
        let g = rand_tensor(&mut rng, &[3, 2]);
        let mut grad = vec![0.0; l.num_params()];
        l.backward(&x, &g, Some(&mut grad), false).unwrap();
        let f = |l: &Linear<f64>| dot(&l.forward(&x).unwrap(), &g);
        for i in 0..l.num_params() {
            let mut p = l.clone();
            let mut m = l.clone();
            let h = 1e-6;
            if i < l.weight.len() {
                p.weight[i] += h;
                m.weight[i] -= h;
            } else {
                p.bias[i - l.weight.len()] += h;
                m.bias[i - l.weight.len()] -= h;
            }
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-7, "param {i}: {fd} vs {}", grad[i]);
        }
    }
}
