//! Dense tensors.
//!
//! Spatial activations use a channel-major `[C, N, H, W]` layout so a whole
//! mini-batch lowers to a single gemm per layer. Flat activations are
//! `[F, N]`.

use crate::error::{NnError, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(NnError::Shape(format!("shape {shape:?} needs {len} elements, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Batch size: the second axis in both layouts.
    pub fn batch(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(NnError::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| U::from_f64_lossy(x.as_f64())).collect() }
    }

    /// `[C, N, H, W]` → `[C·H·W, N]`, features ordered `(c, h, w)`.
    pub fn flatten_spatial(&self) -> Result<Self> {
        let [c, n, h, w] = self.dims4()?;
        let hw = h * w;
        let mut out = vec![T::zero(); self.data.len()];
        for ci in 0..c {
            for ni in 0..n {
                let src = &self.data[(ci * n + ni) * hw..(ci * n + ni + 1) * hw];
                for (p, &v) in src.iter().enumerate() {
                    out[(ci * hw + p) * n + ni] = v;
                }
            }
        }
        Self::from_vec(&[c * hw, n], out)
    }

    /// Inverse of [`Tensor::flatten_spatial`].
    pub fn unflatten_spatial(&self, c: usize, h: usize, w: usize) -> Result<Self> {
        let [f, n] = self.dims2()?;
        if f != c * h * w {
            return Err(NnError::Shape(format!("cannot unflatten {f} features to {c}×{h}×{w}")));
        }
        let hw = h * w;
        let mut out = vec![T::zero(); self.data.len()];
        for ci in 0..c {
            for ni in 0..n {
                for p in 0..hw {
                    out[(ci * n + ni) * hw + p] = self.data[(ci * hw + p) * n + ni];
                }
            }
        }
        Self::from_vec(&[c, n, h, w], out)
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[c, n, h, w] => Ok([c, n, h, w]),
            s => Err(NnError::Shape(format!("expected a 4-d tensor, got {s:?}"))),
        }
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape.as_slice() {
            &[f, n] => Ok([f, n]),
            s => Err(NnError::Shape(format!("expected a 2-d tensor, got {s:?}"))),
        }
    }

    /// Concatenates along the leading (channel/feature) axis.
    pub fn concat_leading(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| NnError::Shape("empty concat".into()))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(NnError::Shape(format!("concat mismatch: {:?} vs {:?}", first.shape, p.shape)));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Self::from_vec(&shape, data)
    }

    /// Splits along the leading axis into pieces of the given sizes.
    pub fn split_leading(&self, sizes: &[usize]) -> Result<Vec<Self>> {
        let tail = &self.shape[1..];
        let stride: usize = tail.iter().product();
        if sizes.iter().sum::<usize>() != self.shape[0] {
            return Err(NnError::Shape(format!("split {sizes:?} of {:?}", self.shape)));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut off = 0;
        for &s in sizes {
            let mut shape = vec![s];
            shape.extend_from_slice(tail);
            out.push(Self::from_vec(&shape, self.data[off * stride..(off + s) * stride].to_vec())?);
            off += s;
        }
        Ok(out)
    }

    /// Selects samples `idx` along the batch axis.
    pub fn select_batch(&self, idx: &[usize]) -> Self {
        let lead = self.shape[0];
        let n = self.batch();
        let inner: usize = self.shape[2..].iter().product();
        let mut data = Vec::with_capacity(lead * idx.len() * inner);
        for l in 0..lead {
            for &i in idx {
                let s = (l * n + i) * inner;
                data.extend_from_slice(&self.data[s..s + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[1] = idx.len();
        Self { shape, data }
    }

    /// Copies out sample `i` of the batch as a contiguous `[lead, inner]` block.
    pub fn sample(&self, i: usize) -> Vec<T> {
        let lead = self.shape[0];
        let n = self.batch();
        let inner: usize = self.shape[2..].iter().product();
        let mut out = Vec::with_capacity(lead * inner);
        for l in 0..lead {
            let s = (l * n + i) * inner;
            out.extend_from_slice(&self.data[s..s + inner]);
        }
        out
    }

    /// Stacks per-sample blocks (each `[lead, inner]`) into one batch tensor.
    pub fn stack_samples(samples: &[&[T]], per_sample_shape: &[usize]) -> Result<Self> {
        let lead = per_sample_shape[0];
        let inner: usize = per_sample_shape[1..].iter().product();
        let n = samples.len();
        let mut data = vec![T::zero(); lead * n * inner];
        for (i, s) in samples.iter().enumerate() {
            if s.len() != lead * inner {
                return Err(NnError::Shape(format!("sample {i} has {} values, expected {}", s.len(), lead * inner)));
            }
            for l in 0..lead {
                data[(l * n + i) * inner..(l * n + i + 1) * inner].copy_from_slice(&s[l * inner..(l + 1) * inner]);
            }
        }
        let mut shape = vec![lead, n];
        shape.extend_from_slice(&per_sample_shape[1..]);
        Self::from_vec(&shape, data)
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn flatten_roundtrip(c in 1usize..4, n in 1usize..4, h in 1usize..5, w in 1usize..5) {
            let len = c * n * h * w;
            let t = Tensor::from_vec(&[c, n, h, w], (0..len).map(|i| i as f64).collect()).unwrap();
            let back = t.flatten_spatial().unwrap().unflatten_spatial(c, h, w).unwrap();
            prop_assert_eq!(t, back);
        }

        #[test]
        fn stack_then_sample_roundtrip(c in 1usize..4, n in 1usize..5, hw in 1usize..6) {
            let samples: Vec<Vec<f32>> =
                (0..n).map(|i| (0..c * hw).map(|j| (i * 100 + j) as f32).collect()).collect();
            let refs: Vec<&[f32]> = samples.iter().map(|s| s.as_slice()).collect();
            let t = Tensor::stack_samples(&refs, &[c, hw]).unwrap();
            for (i, s) in samples.iter().enumerate() {
                prop_assert_eq!(&t.sample(i), s);
            }
        }
    }

    #[test]
    fn flatten_orders_channel_then_pixel() {
        // one sample, 2 channels of 2×1
        let t = Tensor::from_vec(&[2, 1, 2, 1], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let f = t.flatten_spatial().unwrap();
        assert_eq!(f.shape(), &[4, 1]);
        assert_eq!(f.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn concat_rejects_mismatched_tails() {
        let a = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
        let b = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        assert!(Tensor::concat_leading(&[&a, &b]).is_err());
    }
}
