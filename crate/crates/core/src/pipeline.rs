//! Volume-level inference: patch extraction, per-patch sparse sampling with
//! a cached structural code, and windowed stitching. Also the timestep
//! redundancy report backing the `schedule-report` command.

use ndarray::Array5;
use rayon::prelude::*;

use crate::diffusion::{q_sample, sparse_sample_with_rng, DenoiseModel, PredictionTarget};
use crate::error::{invalid, Result};
use crate::model::{CondSession, Denoiser};
use crate::rng::rng_stream;
use crate::schedule::{subsample_uniform, NoiseSchedule, SparseSchedule};
use crate::volume::{extract_patches, stitch, Volume, Window};

#[derive(Debug, Clone, Copy)]
pub struct EnhanceOptions {
    pub patch: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub window: Window,
    pub seed: u64,
}

/// Per-patch model factory: one sampling session per conditioning patch, so
/// session state (the structural code) is computed once per patch.
pub trait PatchModelFactory: Sync {
    fn session<'a>(&'a self, y: &Array5<f32>) -> Result<Box<dyn DenoiseModel<f32> + 'a>>;
}

impl PatchModelFactory for Denoiser<f32> {
    fn session<'a>(&'a self, y: &Array5<f32>) -> Result<Box<dyn DenoiseModel<f32> + 'a>> {
        Ok(Box::new(CondSession::new(self, y)?))
    }
}

/// Model plus the interpretation of its output: baseline epsilon / velocity
/// predictors sample through the corresponding conversion to x0.
pub struct ModelSampler<'a> {
    pub model: &'a Denoiser<f32>,
    pub target: PredictionTarget,
    pub sched: &'a NoiseSchedule,
}

impl PatchModelFactory for ModelSampler<'_> {
    fn session<'s>(&'s self, y: &Array5<f32>) -> Result<Box<dyn DenoiseModel<f32> + 's>> {
        Ok(Box::new(CondSession::with_target(
            self.model,
            y,
            self.target,
            self.sched,
        )?))
    }
}

pub fn patch_to_tensor(p: &Volume) -> Array5<f32> {
    let (d, h, w) = p.dims();
    Array5::from_shape_vec((1, 1, d, h, w), p.data().to_vec()).expect("patch layout")
}

pub fn tensor_to_patch(t: &Array5<f32>) -> Result<Volume> {
    let (n, c, d, h, w) = t.dim();
    if n != 1 || c != 1 {
        return Err(invalid(format!(
            "expected a (1,1,d,h,w) tensor, got {:?}",
            t.dim()
        )));
    }
    let data: Vec<f32> = t.iter().map(|&v| v.clamp(-1.0, 1.0)).collect();
    Volume::new((d, h, w), data)
}

/// Enhance a degraded volume: extract the inference grid, sparse-sample each
/// patch (independent RNG stream per patch index), stitch. Deterministic for
/// a fixed seed regardless of thread scheduling.
pub fn enhance_volume_with<F: PatchModelFactory>(
    factory: &F,
    sched: &NoiseSchedule,
    sparse: &SparseSchedule,
    input: &Volume,
    opts: &EnhanceOptions,
) -> Result<Volume> {
    let (grid, patches) = extract_patches(input, opts.patch, opts.stride)?;
    let outputs: Vec<Result<Volume>> = patches
        .par_iter()
        .enumerate()
        .map(|(i, patch)| {
            let y = patch_to_tensor(patch);
            let session = factory.session(&y)?;
            let mut rng = rng_stream(opts.seed, i as u64);
            let out = sparse_sample_with_rng(session.as_ref(), &y, sparse, sched, &mut rng)?;
            tensor_to_patch(&out)
        })
        .collect();
    let mut enhanced = Vec::with_capacity(outputs.len());
    for o in outputs {
        enhanced.push(o?);
    }
    stitch(&grid, &enhanced, opts.window)
}

pub fn enhance_volume(
    model: &Denoiser<f32>,
    sched: &NoiseSchedule,
    sparse: &SparseSchedule,
    target: PredictionTarget,
    input: &Volume,
    opts: &EnhanceOptions,
) -> Result<Volume> {
    let sampler = ModelSampler {
        model,
        target,
        sched,
    };
    enhance_volume_with(&sampler, sched, sparse, input, opts)
}

// ---------------------------------------------------------------------------
// Timestep redundancy report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct KReport {
    pub k: usize,
    pub indices: Vec<usize>,
    /// Mean cosine similarity of clean-sample predictions at consecutive
    /// sparse indices (1.0 when K = 1).
    pub mean_consecutive_cos: f64,
}

#[derive(Debug, Clone)]
pub struct ScheduleReport {
    pub t_max: usize,
    /// Cosine similarity of predictions at (t, t+1) for t = 1..T-1.
    pub dense_consecutive: Vec<f64>,
    pub per_k: Vec<KReport>,
}

impl ScheduleReport {
    pub fn mean_dense_cos(&self) -> f64 {
        if self.dense_consecutive.is_empty() {
            1.0
        } else {
            self.dense_consecutive.iter().sum::<f64>() / self.dense_consecutive.len() as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,t_or_k,value,indices\n");
        for (i, c) in self.dense_consecutive.iter().enumerate() {
            out.push_str(&format!("dense,{},{c:.6},\n", i + 1));
        }
        for k in &self.per_k {
            let idx = k
                .indices
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            out.push_str(&format!(
                "sparse,{},{:.6},{}\n",
                k.k, k.mean_consecutive_cos, idx
            ));
        }
        out
    }
}

pub fn cosine_similarity(a: &Array5<f32>, b: &Array5<f32>) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na < 1e-24 && nb < 1e-24 {
        1.0
    } else if na < 1e-24 || nb < 1e-24 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Probe inter-step prediction redundancy: for every dense t the probe patch
/// is corrupted with one fixed noise draw (the degraded patch stands in for
/// the unavailable clean data) and the model predicts the clean sample;
/// neighbouring predictions are compared by cosine similarity, and each
/// requested K echoes its sparse subset with the similarity along it.
pub fn schedule_report(
    model: &dyn DenoiseModel<f32>,
    probe: &Array5<f32>,
    sched: &NoiseSchedule,
    k_list: &[usize],
    seed: u64,
) -> Result<ScheduleReport> {
    let t_max = sched.t_max();
    for &k in k_list {
        if k < 1 || k > t_max {
            return Err(invalid(format!("K = {k} outside 1..={t_max}")));
        }
    }
    let mut eps = Array5::<f32>::zeros(probe.dim());
    let mut rng = crate::rng::rng_from_seed(seed);
    crate::rng::fill_standard_normal(&mut rng, eps.as_slice_mut().unwrap());

    let preds: Vec<Array5<f32>> = (1..=t_max)
        .map(|t| {
            let x_t = q_sample(probe, &eps, &[t], sched)?;
            model.predict_x0(&x_t, probe, t)
        })
        .collect::<Result<Vec<_>>>()?;
    let dense_consecutive: Vec<f64> = preds
        .windows(2)
        .map(|w| cosine_similarity(&w[0], &w[1]))
        .collect();
    let mut per_k = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let sub = subsample_uniform(t_max, k)?;
        let idx = sub.indices().to_vec();
        let mean = if idx.len() < 2 {
            1.0
        } else {
            idx.windows(2)
                .map(|w| cosine_similarity(&preds[w[0] - 1], &preds[w[1] - 1]))
                .sum::<f64>()
                / (idx.len() - 1) as f64
        };
        per_k.push(KReport {
            k,
            indices: idx,
            mean_consecutive_cos: mean,
        });
    }
    Ok(ScheduleReport {
        t_max,
        dense_consecutive,
        per_k,
    })
}
