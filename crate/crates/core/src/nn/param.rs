use ndarray::ArrayD;

use super::Scalar;
use crate::rng::SeededRng;

/// A learnable tensor and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Param {
            value: ArrayD::zeros(ndarray::IxDyn(shape)),
            grad: ArrayD::zeros(ndarray::IxDyn(shape)),
        }
    }

    /// He-style variance scaling: N(0, 2/fan_in).
    pub fn variance_scaled(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let mut p = Param::zeros(shape);
        for v in p.value.iter_mut() {
            *v = T::from_f64(crate::rng::normal_f64(rng) * std);
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Overwrite the value with N(0, std) draws. Used by tests that need all
    /// pathways active regardless of zero-initialized layers.
    pub fn randomize(&mut self, std: f64, rng: &mut SeededRng) {
        for v in self.value.iter_mut() {
            *v = T::from_f64(crate::rng::normal_f64(rng) * std);
        }
    }
}

/// Callback receiving every named parameter of a module tree.
pub type ParamVisitor<'a, T> = &'a mut dyn FnMut(String, &mut Param<T>);

/// Anything holding learnable parameters. Traversal order is deterministic
/// (declaration order), which fixes checkpoint tensor order and optimizer
/// state alignment.
pub trait Parameterized<T: Scalar> {
    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<'_, T>);

    fn zero_grads(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.numel());
        n
    }

    /// Overwrite every parameter with N(0, std) draws (test helper: breaks
    /// zero-initialized layers so every gradient pathway is exercised).
    fn randomize_all(&mut self, std: f64, rng: &mut SeededRng) {
        self.visit_params("", &mut |_, p| p.randomize(std, rng));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
