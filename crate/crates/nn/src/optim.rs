use serde::{Deserialize, Serialize};

use crate::network::Params;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// Adam with bias correction; moments kept in `f64`.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, num_params: usize) -> Self {
        Self { cfg, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    pub fn step<T: Real, P: Params<T> + ?Sized>(&mut self, model: &mut P, grad: &[T]) {
        assert_eq!(grad.len(), self.m.len(), "gradient/optimizer size mismatch");
        self.t += 1;
        let AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, epsilon: eps } = self.cfg;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut off = 0;
        model.visit_params_mut(&mut |_, p| {
            for (i, w) in p.iter_mut().enumerate() {
                let g = grad[off + i].as_f64();
                let mi = &mut m[off + i];
                let vi = &mut v[off + i];
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let upd = lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *w -= T::from_f64_lossy(upd);
            }
            off += p.len();
        });
    }
}
