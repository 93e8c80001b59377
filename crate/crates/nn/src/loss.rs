//! Losses on `[F, N]` / `[C, N, H, W]` tensors. All return the *summed*
//! loss over the batch and the gradient of that sum; callers scale.

use crate::real::Real;
use crate::tensor::Tensor;

/// Column-wise softmax of `[C, N]` logits, returned as per-sample rows.
pub fn softmax_columns<T: Real>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let [c, n] = logits.dims2().expect("2-d logits");
    let d = logits.data();
    (0..n)
        .map(|j| {
            let col: Vec<f64> = (0..c).map(|i| d[i * n + j].as_f64()).collect();
            softmax(&col)
        })
        .collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Summed softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> (f64, Tensor<T>) {
    let [c, n] = logits.dims2().expect("2-d logits");
    assert_eq!(labels.len(), n, "one label per column");
    let probs = softmax_columns(logits);
    let mut grad = Tensor::zeros(&[c, n]);
    let mut loss = 0.0;
    let g = grad.data_mut();
    for (j, (p, &y)) in probs.iter().zip(labels).enumerate() {
        loss -= p[y].max(1e-300).ln();
        for i in 0..c {
            let t = if i == y { 1.0 } else { 0.0 };
            g[i * n + j] = T::from_f64_lossy(p[i] - t);
        }
    }
    (loss, grad)
}

/// Summed squared error (per-sample mean over elements is the caller's
/// business) and its gradient w.r.t. `pred`.
pub fn squared_error<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> (f64, Tensor<T>) {
    assert_eq!(pred.shape(), target.shape(), "squared_error shape mismatch");
    let mut loss = 0.0;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d.as_f64() * d.as_f64();
            d + d
        })
        .collect();
    (loss, Tensor::from_vec(pred.shape(), data).expect("same shape"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_gradient_matches_finite_difference() {
        let logits = Tensor::from_vec(&[3, 2], vec![0.1f64, -0.4, 2.0, 0.3, -1.0, 0.7]).unwrap();
        let labels = [2, 0];
        let (_, g) = softmax_cross_entropy(&logits, &labels);
        for i in 0..6 {
            let mut p = logits.clone();
            let mut m = logits.clone();
            p.data_mut()[i] += 1e-6;
            m.data_mut()[i] -= 1e-6;
            let fd = (softmax_cross_entropy(&p, &labels).0 - softmax_cross_entropy(&m, &labels).0) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 999.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
