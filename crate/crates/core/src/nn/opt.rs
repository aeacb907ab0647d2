//! Adam optimizer and global-norm gradient clipping.

use ndarray::ArrayD;

use super::param::Parameterized;
use super::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-parameter first/second moment estimates, keyed by the
/// deterministic parameter traversal order.
pub struct Adam<T: Scalar> {
    cfg: AdamConfig,
    step: u64,
    state: Vec<(String, ArrayD<T>, ArrayD<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            state: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, target: &mut dyn Parameterized<T>) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let lr = self.cfg.lr;
        let bias1 = 1.0 - self.cfg.beta1.powi(t);
        let bias2 = 1.0 - self.cfg.beta2.powi(t);
        let eps = T::from_f64(self.cfg.eps);
        let one = T::one();

        let first = self.state.is_empty();
        let state = &mut self.state;
        let mut i = 0usize;
        target.visit_params("", &mut |name, p| {
            if first {
                state.push((
                    name.clone(),
                    ArrayD::zeros(p.value.raw_dim()),
                    ArrayD::zeros(p.value.raw_dim()),
                ));
            }
            let (sname, m, v) = &mut state[i];
            assert_eq!(*sname, name, "optimizer state order diverged");
            i += 1;
            let scale_m = T::from_f64(lr / bias1);
            let inv_sqrt_bias2 = 1.0 / bias2.sqrt();
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(&p.grad)
                .for_each(|val, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let denom = T::from_f64(v.as_f64().sqrt() * inv_sqrt_bias2) + eps;
                    *val -= scale_m * *m / denom;
                });
        });
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(target: &mut dyn Parameterized<T>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    target.visit_params("", &mut |_, p| {
        for &g in p.grad.iter() {
            let g = g.as_f64();
            sq += g * g;
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        target.visit_params("", &mut |_, p| {
            p.grad.mapv_inplace(|g| g * scale);
        });
    }
    norm
}
