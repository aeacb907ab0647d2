//! Dense noise schedules (beta, alpha-bar) and uniform sparse subsampling.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Functional form of the beta schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleForm {
    #[default]
    Linear,
    Cosine,
}

/// A dense diffusion schedule over `T` steps. `alpha_bar[t]` is the running
/// product of `(1 - beta_s)` for `s <= t`, with `alpha_bar[0] = 1` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    form: ScheduleForm,
    beta_min: f64,
    beta_max: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;

impl NoiseSchedule {
    pub fn build(form: ScheduleForm, t: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        match form {
            ScheduleForm::Linear => build_linear_schedule(t, beta_min, beta_max),
            ScheduleForm::Cosine => build_cosine_schedule(t, beta_min, beta_max),
        }
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn form(&self) -> ScheduleForm {
        self.form
    }

    pub fn beta_bounds(&self) -> (f64, f64) {
        (self.beta_min, self.beta_max)
    }

    /// beta_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "beta index {t} out of range");
        self.beta[t - 1]
    }

    /// alpha_bar_t for t in 0..=T.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "alpha_bar index {t} out of range");
        self.alpha_bar[t]
    }

    fn from_betas(
        form: ScheduleForm,
        beta_min: f64,
        beta_max: f64,
        beta: Vec<f64>,
    ) -> Result<Self> {
        let t_max = beta.len();
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0f64;
        for (i, &b) in beta.iter().enumerate() {
            if !(0.0 < b && b < 1.0) {
                return Err(invalid(format!("beta_{} = {b} outside (0, 1)", i + 1)));
            }
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        if prod <= 0.0 {
            return Err(invalid("alpha_bar underflowed to zero"));
        }
        for w in alpha_bar.windows(2) {
            if !(w[1] < w[0]) {
                return Err(invalid("alpha_bar must be strictly decreasing"));
            }
        }
        Ok(NoiseSchedule {
            t_max,
            form,
            beta_min,
            beta_max,
            beta,
            alpha_bar,
        })
    }
}

fn check_bounds(t: usize, beta_min: f64, beta_max: f64) -> Result<()> {
    if t < 1 {
        return Err(invalid("schedule needs T >= 1"));
    }
    if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
        return Err(invalid(format!(
            "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }
    Ok(())
}

/// Linear beta ramp from `beta_min` to `beta_max` over `t` steps.
pub fn build_linear_schedule(t: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    check_bounds(t, beta_min, beta_max)?;
    let beta = if t == 1 {
        vec![beta_min]
    } else {
        (0..t)
            .map(|i| beta_min + (i as f64) / (t as f64 - 1.0) * (beta_max - beta_min))
            .collect()
    };
    NoiseSchedule::from_betas(ScheduleForm::Linear, beta_min, beta_max, beta)
}

/// Squared-cosine alpha-bar schedule; betas are derived as
/// `1 - alpha_bar(t)/alpha_bar(t-1)` and clamped into (beta_min, 0.999].
pub fn build_cosine_schedule(t: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    check_bounds(t, beta_min, beta_max)?;
    let s = 0.008f64;
    let f = |u: f64| {
        (((u / t as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2)
            .cos()
            .powi(2)
    };
    let f0 = f(0.0);
    let mut prev = 1.0f64;
    let beta = (1..=t)
        .map(|i| {
            let ab = f(i as f64) / f0;
            let b = (1.0 - ab / prev).clamp(beta_min, 0.999);
            prev *= 1.0 - b;
            b
        })
        .collect();
    NoiseSchedule::from_betas(ScheduleForm::Cosine, beta_min, beta_max, beta)
}

/// A strictly increasing K-element subset of `1..=T`, anchored at T so the
/// reverse process starts from maximal noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseSchedule {
    indices: Vec<usize>,
    parent_t: usize,
}

/// Uniform subsampling: `s_k = ceil(k*T/K)` for k = 1..=K.
pub fn subsample_uniform(t: usize, k: usize) -> Result<SparseSchedule> {
    if k < 1 {
        return Err(invalid("K must be >= 1"));
    }
    if k > t {
        return Err(invalid(format!("K = {k} exceeds T = {t}")));
    }
    let indices = (1..=k).map(|i| (i * t).div_ceil(k)).collect();
    Ok(SparseSchedule {
        indices,
        parent_t: t,
    })
}

impl SparseSchedule {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn parent_t(&self) -> usize {
        self.parent_t
    }

    /// s_1 < s_2 < ... < s_K = T.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}
