use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::ParamStore;

/// Adam with bias-corrected first and second moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Array2<f64>> = store.iter().map(|(_, t)| Array2::zeros(t.dim())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let clip = match self.clip_norm {
            Some(c) => {
                let n = grads.norm();
                if n > c { c / n } else { 1.0 }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.params.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.get_mut(i);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * clip;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            });
        }
    }
}

/// Multiplies the learning rate by `gamma` once per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialLr {
    pub initial: f64,
    pub gamma: f64,
}

impl ExponentialLr {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial * self.gamma.powi(epoch as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.add("x", Array2::from_elem((1, 3), 5.0));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let p = g.param(0);
                let c = g.add_const(p, -1.0);
                let sq = g.mul(c, c);
                let l = g.sum_all(sq);
                g.backward(l)
            };
            opt.step(&mut store, &grads);
        }
        assert!(store.get(0).iter().all(|v| (v - 1.0).abs() < 1e-2));
    }

    #[test]
    fn schedule_decays_per_epoch() {
        let s = ExponentialLr { initial: 1e-4, gamma: 0.25 };
        assert_eq!(s.lr_at(0), 1e-4);
        assert!((s.lr_at(2) - 6.25e-6).abs() < 1e-18);
    }
}
