//! The conditional denoiser: UNet plus optional structural modulation.

use ndarray::{Array2, Array5};
use serde::{Deserialize, Serialize};

use crate::diffusion::DenoiseModel;
use crate::error::{shape_err, Result};
use crate::modulation::{Stm, StmCache, StmConfig};
use crate::net::{embed_timesteps, UNet3d, UNetCache, UNetConfig};
use crate::nn::ops::concat_channels;
use crate::nn::{ParamVisitor, Parameterized, Scalar};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    /// Structural time-embedding modulation; None disables it.
    pub stm: Option<StmConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            unet: UNetConfig::default(),
            stm: Some(StmConfig::default()),
        }
    }
}

pub struct Denoiser<T: Scalar> {
    cfg: ModelConfig,
    pub unet: UNet3d<T>,
    pub stm: Option<Stm<T>>,
}

pub struct DenoiserCache<T: Scalar> {
    unet: UNetCache<T>,
    stm: Option<StmCache<T>>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        let unet = UNet3d::new(&cfg.unet, rng)?;
        let stm = cfg
            .stm
            .as_ref()
            .map(|scfg| Stm::new(scfg, cfg.unet.num_blocks(), cfg.unet.time_dim, rng));
        Ok(Denoiser {
            cfg: cfg.clone(),
            unet,
            stm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn has_stm(&self) -> bool {
        self.stm.is_some()
    }

    fn check_pair(&self, x_t: &Array5<T>, y: &Array5<T>, ts: &[usize]) -> Result<()> {
        if x_t.dim() != y.dim() {
            return Err(shape_err(format!("x_t {:?} vs y {:?}", x_t.dim(), y.dim())));
        }
        if x_t.dim().1 != 1 {
            return Err(shape_err(format!(
                "expected 1-channel patches, got {}",
                x_t.dim().1
            )));
        }
        if ts.len() != x_t.dim().0 {
            return Err(shape_err(format!(
                "batch of {} with {} timesteps",
                x_t.dim().0,
                ts.len()
            )));
        }
        Ok(())
    }

    /// Structural code of the conditioning patch, or None when modulation is
    /// disabled. Compute once per patch and reuse across sampler steps.
    pub fn encode_condition(&self, y: &Array5<T>) -> Result<Option<Array2<T>>> {
        match &self.stm {
            Some(stm) => Ok(Some(stm.encoder.encode(y)?)),
            None => Ok(None),
        }
    }

    fn block_embeds(&self, e: &Array2<T>, code: Option<&Array2<T>>) -> Result<Vec<Array2<T>>> {
        match (&self.stm, code) {
            (Some(stm), Some(c)) => stm.modulate_all(e, c),
            (None, None) => Ok((0..self.unet.num_blocks()).map(|_| e.clone()).collect()),
            (Some(_), None) => Err(shape_err("modulation enabled but no code supplied")),
            (None, Some(_)) => Err(shape_err("code supplied but modulation is disabled")),
        }
    }

    /// Inference with a precomputed structural code (None when STM is off).
    pub fn forward_with_code(
        &self,
        x_t: &Array5<T>,
        y: &Array5<T>,
        ts: &[usize],
        code: Option<&Array2<T>>,
    ) -> Result<Array5<T>> {
        self.check_pair(x_t, y, ts)?;
        let e = embed_timesteps::<T>(ts, self.cfg.unet.time_dim)?;
        let tembs = self.block_embeds(&e, code)?;
        self.unet.forward(&concat_channels(x_t, y), &tembs)
    }

    /// Inference; encodes the condition internally when modulation is on.
    pub fn forward(&self, x_t: &Array5<T>, y: &Array5<T>, ts: &[usize]) -> Result<Array5<T>> {
        let code = self.encode_condition(y)?;
        self.forward_with_code(x_t, y, ts, code.as_ref())
    }

    /// Training pass with cache.
    pub fn forward_train(
        &self,
        x_t: &Array5<T>,
        y: &Array5<T>,
        ts: &[usize],
    ) -> Result<(Array5<T>, DenoiserCache<T>)> {
        self.check_pair(x_t, y, ts)?;
        let e = embed_timesteps::<T>(ts, self.cfg.unet.time_dim)?;
        let (tembs, stmc) = match &self.stm {
            Some(stm) => {
                let (tembs, c) = stm.modulate_all_t(&e, y)?;
                (tembs, Some(c))
            }
            None => (
                (0..self.unet.num_blocks()).map(|_| e.clone()).collect(),
                None,
            ),
        };
        let (out, unetc) = self.unet.forward_t(&concat_channels(x_t, y), &tembs)?;
        Ok((
            out,
            DenoiserCache {
                unet: unetc,
                stm: stmc,
            },
        ))
    }

    /// Accumulate parameter gradients from dL/d(output).
    pub fn backward(&mut self, cache: &DenoiserCache<T>, d_out: &Array5<T>) {
        let (_dx, dtembs) = self.unet.backward(&cache.unet, d_out);
        if let (Some(stm), Some(stmc)) = (&mut self.stm, &cache.stm) {
            stm.backward(stmc, &dtembs);
        }
    }
}

impl<T: Scalar> Parameterized<T> for Denoiser<T> {
    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<'_, T>) {
        let unet_prefix = if prefix.is_empty() {
            "unet".to_string()
        } else {
            format!("{prefix}.unet")
        };
        self.unet.visit_params(&unet_prefix, f);
        if let Some(stm) = &mut self.stm {
            let stm_prefix = if prefix.is_empty() {
                "stm".to_string()
            } else {
                format!("{prefix}.stm")
            };
            stm.visit_params(&stm_prefix, f);
        }
    }
}

/// One sampling run over a fixed conditioning batch: the structural code is
/// computed once here and reused by every model evaluation. The network
/// output is converted to a clean-sample estimate according to the training
/// prediction target (baseline epsilon / v-prediction models sample through
/// the same algebra).
pub struct CondSession<'a, T: Scalar> {
    model: &'a Denoiser<T>,
    code: Option<Array2<T>>,
    target: crate::diffusion::PredictionTarget,
    sched: Option<&'a crate::schedule::NoiseSchedule>,
}

impl<'a, T: Scalar> CondSession<'a, T> {
    /// Session for a clean-sample-predicting model.
    pub fn new(model: &'a Denoiser<T>, y: &Array5<T>) -> Result<Self> {
        let code = model.encode_condition(y)?;
        Ok(CondSession {
            model,
            code,
            target: crate::diffusion::PredictionTarget::X0WithVSupervision,
            sched: None,
        })
    }

    /// Session for an arbitrary prediction target; the schedule drives the
    /// output-to-x0 conversion for the epsilon and velocity baselines.
    pub fn with_target(
        model: &'a Denoiser<T>,
        y: &Array5<T>,
        target: crate::diffusion::PredictionTarget,
        sched: &'a crate::schedule::NoiseSchedule,
    ) -> Result<Self> {
        let code = model.encode_condition(y)?;
        Ok(CondSession {
            model,
            code,
            target,
            sched: Some(sched),
        })
    }
}

impl<T: Scalar> DenoiseModel<T> for CondSession<'_, T> {
    fn predict_x0(&self, x_t: &Array5<T>, y: &Array5<T>, t: usize) -> Result<Array5<T>> {
        let ts = vec![t; x_t.dim().0];
        let out = self
            .model
            .forward_with_code(x_t, y, &ts, self.code.as_ref())?;
        use crate::diffusion::PredictionTarget::*;
        match self.target {
            X0WithVSupervision => Ok(out),
            VDirect => {
                let sched = self.sched.ok_or_else(|| {
                    shape_err("velocity-predicting session needs a schedule for conversion")
                })?;
                crate::diffusion::x0_from_velocity(x_t, &out, &ts, sched)
            }
            Epsilon => {
                let sched = self.sched.ok_or_else(|| {
                    shape_err("noise-predicting session needs a schedule for conversion")
                })?;
                crate::diffusion::x0_from_epsilon(x_t, &out, &ts, sched)
            }
        }
    }
}
