//! AdamW with a one-cycle learning-rate schedule and global-norm clipping.

use alloc::vec::Vec;

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of the run spent warming up.
    pub warmup_fraction: f64,
    /// Start and end learning rate are `learning_rate / final_div`.
    pub final_div: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_fraction: 0.1,
            final_div: 25.0,
            grad_clip: 1.0,
        }
    }
}

/// Linear warm-up from `peak / div` to `peak` over the first
/// `warmup_fraction` of the run, then cosine decay back to `peak / div`.
pub fn one_cycle_lr(step: usize, total: usize, cfg: &OptimConfig) -> f64 {
    let peak = cfg.learning_rate;
    let floor = peak / cfg.final_div;
    if total <= 1 {
        return peak;
    }
    let warm = libm::round(cfg.warmup_fraction * total as f64) as usize;
    if step < warm {
        return floor + (peak - floor) * step as f64 / warm as f64;
    }
    let span = (total - 1 - warm).max(1) as f64;
    let t = ((step - warm) as f64 / span).min(1.0);
    floor + 0.5 * (peak - floor) * (1.0 + libm::cos(core::f64::consts::PI * t))
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: OptimConfig) -> Self {
        let zeros = |s: &ParamStore| (0..s.len()).map(|i| Tensor::zeros(s.tensor(i).shape())).collect();
        Self { first: zeros(store), second: zeros(store), cfg, steps: 0 }
    }

    /// Scales `grads` in place so their global L2 norm is at most the clip
    /// value; returns the norm before clipping.
    pub fn clip(&self, grads: &mut [Tensor]) -> f64 {
        let norm = libm::sqrt(grads.iter().map(Tensor::sq_norm).sum::<f64>());
        if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            let s = self.cfg.grad_clip / norm;
            grads.iter_mut().for_each(|g| g.scale_assign(s));
        }
        norm
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), store.len());
        self.steps += 1;
        let OptimConfig { beta1, beta2, eps, weight_decay, .. } = self.cfg;
        let bc1 = 1.0 - libm::pow(beta1, self.steps as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.steps as f64);
        for (i, g) in grads.iter().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let w = store.tensor_mut(i).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] -= lr * (mh / (libm::sqrt(vh) + eps) + weight_decay * w[j]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_cycle_endpoints() {
        let cfg = OptimConfig { learning_rate: 1.0, final_div: 25.0, ..OptimConfig::default() };
        assert!((one_cycle_lr(0, 100, &cfg) - 0.04).abs() < 1e-12);
        assert!((one_cycle_lr(10, 100, &cfg) - 1.0).abs() < 1e-12);
        assert!((one_cycle_lr(99, 100, &cfg) - 0.04).abs() < 1e-12);
        let lrs: Vec<f64> = (10..100).map(|s| one_cycle_lr(s, 100, &cfg)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::from_vec(&[2], alloc::vec![1.0, -1.0]));
        let mut opt = AdamW::new(&store, OptimConfig { weight_decay: 0.0, ..OptimConfig::default() });
        let g = [Tensor::from_vec(&[2], alloc::vec![0.5, -2.0])];
        opt.step(&mut store, &g, 0.1);
        // first Adam step moves each coordinate by lr * sign(g)
        let x = store.tensor(0).data();
        assert!((x[0] - 0.9).abs() < 1e-6 && (x[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let store = ParamStore::new();
        let opt = AdamW::new(&store, OptimConfig { grad_clip: 1.0, ..OptimConfig::default() });
        let mut g = [Tensor::from_vec(&[2], alloc::vec![3.0, 4.0])];
        assert_eq!(opt.clip(&mut g), 5.0);
        assert!((g[0].sq_norm() - 1.0).abs() < 1e-12);
    }
}
