//! Forward corruption, parameterization conversions (x0 / eps / v), the
//! velocity-space training objective, and the sparse deterministic reverse
//! sampler.
//!
//! Tensors are batched as (N, C, D, H, W) with one timestep per batch element
//! where applicable. Conversions are evaluated element-wise in f64 regardless
//! of the storage type: near t = 1 the `1/sqrt(1 - alpha_bar)` factor is large
//! and f32 intermediate rounding alone would eat the cross-route tolerance.

use ndarray::Array5;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::Scalar;
use crate::rng::{fill_standard_normal, rng_from_seed};
use crate::schedule::{NoiseSchedule, SparseSchedule};

/// What the network output means, and which space the loss lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictionTarget {
    /// Predict the clean sample; supervise the velocity implied by it.
    #[default]
    X0WithVSupervision,
    /// Predict and supervise velocity directly.
    VDirect,
    /// Predict and supervise the injected noise.
    Epsilon,
}

fn check_t(t: usize, sched: &NoiseSchedule) -> Result<(f64, f64)> {
    if t < 1 || t > sched.t_max() {
        return Err(invalid(format!(
            "timestep {t} outside 1..={}",
            sched.t_max()
        )));
    }
    let ab = sched.alpha_bar(t);
    Ok((ab.sqrt(), (1.0 - ab).sqrt()))
}

fn check_same_shape<T: Scalar>(a: &Array5<T>, b: &Array5<T>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(shape_err(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn check_batch_t(n: usize, t: &[usize]) -> Result<()> {
    if t.len() != n {
        return Err(shape_err(format!(
            "batch has {n} samples but {} timesteps were given",
            t.len()
        )));
    }
    Ok(())
}

fn per_sample_map<T: Scalar>(
    a: &Array5<T>,
    b: &Array5<T>,
    t: &[usize],
    sched: &NoiseSchedule,
    f: impl Fn(f64, f64, f64, f64) -> f64,
) -> Result<Array5<T>> {
    check_same_shape(a, b, "operand shapes differ")?;
    check_batch_t(a.dim().0, t)?;
    let mut out = Array5::<T>::zeros(a.dim());
    for (n, &tn) in t.iter().enumerate() {
        let (sa, sb) = check_t(tn, sched)?;
        let av = a.index_axis(ndarray::Axis(0), n);
        let bv = b.index_axis(ndarray::Axis(0), n);
        let mut ov = out.index_axis_mut(ndarray::Axis(0), n);
        ndarray::Zip::from(&mut ov)
            .and(&av)
            .and(&bv)
            .for_each(|o, &x, &y| {
                *o = T::from_f64(f(sa, sb, x.as_f64(), y.as_f64()));
            });
    }
    Ok(out)
}

/// Forward corruption: `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample<T: Scalar>(
    x0: &Array5<T>,
    eps: &Array5<T>,
    t: &[usize],
    sched: &NoiseSchedule,
) -> Result<Array5<T>> {
    per_sample_map(x0, eps, t, sched, |sa, sb, x, e| sa * x + sb * e)
}

/// Velocity from its definition: `v = sqrt(ab_t) eps - sqrt(1 - ab_t) x0`.
pub fn velocity_from_def<T: Scalar>(
    x0: &Array5<T>,
    eps: &Array5<T>,
    t: &[usize],
    sched: &NoiseSchedule,
) -> Result<Array5<T>> {
    per_sample_map(x0, eps, t, sched, |sa, sb, x, e| sa * e - sb * x)
}

/// Velocity implied by a clean-sample prediction:
/// `v = (sqrt(ab_t) x_t - x0_hat) / sqrt(1 - ab_t)`.
pub fn velocity_from_x0<T: Scalar>(
    x_t: &Array5<T>,
    x0_hat: &Array5<T>,
    t: &[usize],
    sched: &NoiseSchedule,
) -> Result<Array5<T>> {
    per_sample_map(x_t, x0_hat, t, sched, |sa, sb, xt, x0| (sa * xt - x0) / sb)
}

/// Invert the velocity definition: `x0 = sqrt(ab_t) x_t - sqrt(1 - ab_t) v`.
pub fn x0_from_velocity<T: Scalar>(
    x_t: &Array5<T>,
    v: &Array5<T>,
    t: &[usize],
    sched: &NoiseSchedule,
) -> Result<Array5<T>> {
    per_sample_map(x_t, v, t, sched, |sa, sb, xt, vv| sa * xt - sb * vv)
}

/// Clean sample implied by a noise prediction:
/// `x0 = (x_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)`.
pub fn x0_from_epsilon<T: Scalar>(
    x_t: &Array5<T>,
    eps_hat: &Array5<T>,
    t: &[usize],
    sched: &NoiseSchedule,
) -> Result<Array5<T>> {
    per_sample_map(x_t, eps_hat, t, sched, |sa, sb, xt, e| (xt - sb * e) / sa)
}

/// Mean squared error over every element of a non-empty batch.
pub fn mean_squared_error<T: Scalar>(truth: &Array5<T>, pred: &Array5<T>) -> Result<f64> {
    check_same_shape(truth, pred, "loss operands differ")?;
    if truth.is_empty() {
        return Err(invalid("loss over an empty batch"));
    }
    let mut acc = 0.0f64;
    for (a, b) in truth.iter().zip(pred.iter()) {
        let d = a.as_f64() - b.as_f64();
        acc += d * d;
    }
    Ok(acc / truth.len() as f64)
}

/// A model that maps `(x_t, y, t)` to a clean-sample estimate.
pub trait DenoiseModel<T: Scalar>: Sync {
    fn predict_x0(&self, x_t: &Array5<T>, y: &Array5<T>, t: usize) -> Result<Array5<T>>;
}

/// Deterministic reverse sampler over a sparse schedule.
///
/// Starting from pure Gaussian noise at `t = s_K`, each step predicts the
/// clean sample, clamps it to [-1, 1], recovers the implied noise, and
/// re-noises to the next (lower) sparse level; the final level has
/// `alpha_bar = 1` so the last estimate is returned as-is. Exactly K model
/// evaluations; bit-deterministic for a fixed seed.
pub fn sparse_sample<T: Scalar>(
    model: &dyn DenoiseModel<T>,
    y: &Array5<T>,
    sparse: &SparseSchedule,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Array5<T>> {
    sparse_sample_with_rng(model, y, sparse, sched, &mut rng_from_seed(seed))
}

/// [`sparse_sample`] with a caller-owned RNG (used to derive per-patch
/// independent streams during volume enhancement).
pub fn sparse_sample_with_rng<T: Scalar>(
    model: &dyn DenoiseModel<T>,
    y: &Array5<T>,
    sparse: &SparseSchedule,
    sched: &NoiseSchedule,
    rng: &mut crate::rng::SeededRng,
) -> Result<Array5<T>> {
    if sparse.parent_t() != sched.t_max() {
        return Err(invalid(format!(
            "sparse schedule built for T = {} but dense schedule has T = {}",
            sparse.parent_t(),
            sched.t_max()
        )));
    }
    let mut x = Array5::<T>::zeros(y.dim());
    fill_standard_normal(rng, x.as_slice_mut().expect("standard layout"));

    let idx = sparse.indices();
    for k in (0..idx.len()).rev() {
        let t = idx[k];
        let ab_t = sched.alpha_bar(t);
        let (sa, sb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
        let ab_prev = if k == 0 {
            1.0
        } else {
            sched.alpha_bar(idx[k - 1])
        };
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());

        let x0_hat = model.predict_x0(&x, y, t)?;
        check_same_shape(&x0_hat, &x, "model output shape differs from input")?;
        if x0_hat.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(Error::Numerical(format!(
                "model produced a non-finite prediction at timestep {t}"
            )));
        }
        ndarray::Zip::from(&mut x)
            .and(&x0_hat)
            .for_each(|xv, &x0v| {
                let x0c = x0v.as_f64().clamp(-1.0, 1.0);
                let eps_hat = (xv.as_f64() - sa * x0c) / sb;
                *xv = T::from_f64(pa * x0c + pb * eps_hat);
            });
    }
    Ok(x)
}
