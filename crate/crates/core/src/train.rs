//! Training loop: velocity-space supervision over sparse or dense timestep
//! draws, Adam updates with global-norm clipping, CSV convergence logging,
//! and checkpointing.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array5;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::diffusion::{
    mean_squared_error, q_sample, velocity_from_def, velocity_from_x0, PredictionTarget,
};
use crate::error::{format_err, invalid, Error, Result};
use crate::model::{Denoiser, ModelConfig};
use crate::modulation::StmConfig;
use crate::net::UNetConfig;
use crate::nn::{clip_global_norm, Adam, AdamConfig, Parameterized};
use crate::rng::{fill_standard_normal, rng_from_seed, uniform_index, RngState, SeededRng};
use crate::schedule::{subsample_uniform, NoiseSchedule, ScheduleForm, SparseSchedule};
use crate::synth::Manifest;
use crate::volume::{read_vvol, Volume, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Denoise,
    Superres,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Train on t drawn uniformly from the K-element sparse subset.
    Sparse,
    /// Train on t drawn uniformly from 1..=T (baseline rows).
    Dense,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_t() -> usize {
    1000
}
fn default_k() -> usize {
    5
}
fn default_log_interval() -> usize {
    50
}
fn default_val_count() -> usize {
    2
}
fn default_true() -> bool {
    true
}
fn default_beta_min() -> f64 {
    crate::schedule::DEFAULT_BETA_MIN
}
fn default_beta_max() -> f64 {
    crate::schedule::DEFAULT_BETA_MAX
}
fn default_base_channels() -> usize {
    32
}
fn default_level_mults() -> Vec<usize> {
    vec![1, 2, 4]
}
fn default_blocks_per_level() -> usize {
    2
}
fn default_time_dim() -> usize {
    128
}
fn default_norm_groups() -> usize {
    8
}

/// Flat training configuration; the JSON config file uses exactly these
/// field names. Unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    #[serde(default)]
    pub prediction_target: PredictionTarget,
    pub schedule_mode: ScheduleMode,
    pub stm: bool,
    pub patch: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    pub total_steps: usize,
    pub seed: u64,
    /// Dataset manifest path (see the synth module).
    pub manifest: String,
    pub checkpoint_out: String,
    pub log_csv: String,
    #[serde(rename = "T", default = "default_t")]
    pub t_total: usize,
    #[serde(rename = "K", default = "default_k")]
    pub k_sparse: usize,
    #[serde(default)]
    pub schedule_form: ScheduleForm,
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_level_mults")]
    pub level_mults: Vec<usize>,
    #[serde(default = "default_blocks_per_level")]
    pub blocks_per_level: usize,
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
    #[serde(default = "default_norm_groups")]
    pub norm_groups: usize,
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
    /// Held-out volumes (taken from the end of the manifest) enhanced at
    /// every log interval for the convergence curve.
    #[serde(default = "default_val_count")]
    pub val_count: usize,
    /// Deterministic mode: batches are assembled strictly in the step's RNG
    /// order with no lookahead. Required for bit-reproducible runs.
    #[serde(default = "default_true")]
    pub deterministic: bool,
}

impl TrainConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(s).map_err(|e| format_err(format!("train config: {e}")))?;
        cfg.validate_shape()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path.as_ref())?;
        Self::from_json_str(&s)
    }

    /// Structural validation with no filesystem access.
    pub fn validate_shape(&self) -> Result<()> {
        if self.k_sparse < 1 || self.k_sparse > self.t_total {
            return Err(invalid(format!(
                "need 1 <= K <= T, got K={} T={}",
                self.k_sparse, self.t_total
            )));
        }
        if self.batch_size < 1 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if self.total_steps < 1 {
            return Err(invalid("total_steps must be >= 1"));
        }
        if self.log_interval < 1 {
            return Err(invalid("log_interval must be >= 1"));
        }
        for (p, s) in [
            (self.patch.0, self.stride.0),
            (self.patch.1, self.stride.1),
            (self.patch.2, self.stride.2),
        ] {
            if p == 0 || s == 0 || s > p {
                return Err(invalid(format!(
                    "need 1 <= stride <= patch, got patch {:?} stride {:?}",
                    self.patch, self.stride
                )));
            }
        }
        self.model_config().unet.validate()
    }

    /// Paths must resolve before a run starts.
    pub fn validate_paths(&self) -> Result<()> {
        if !Path::new(&self.manifest).exists() {
            return Err(invalid(format!("manifest not found: {}", self.manifest)));
        }
        for out in [&self.checkpoint_out, &self.log_csv] {
            if let Some(parent) = Path::new(out).parent() {
                if !parent.as_os_str().is_empty() && !parent.exists() {
                    return Err(invalid(format!("output directory missing for {out}")));
                }
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            unet: UNetConfig {
                base_channels: self.base_channels,
                level_mults: self.level_mults.clone(),
                blocks_per_level: self.blocks_per_level,
                time_dim: self.time_dim,
                norm_groups: self.norm_groups,
            },
            stm: self.stm.then(StmConfig::default),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(
            self.schedule_form,
            self.t_total,
            self.beta_min,
            self.beta_max,
        )
    }

    /// Sparse subset used for training draws (sparse mode) and sampling.
    /// Dense-trained models sample on a uniform 10-step subset.
    pub fn sampling_schedule(&self) -> Result<SparseSchedule> {
        match self.schedule_mode {
            ScheduleMode::Sparse => subsample_uniform(self.t_total, self.k_sparse),
            ScheduleMode::Dense => subsample_uniform(self.t_total, 10.min(self.t_total)),
        }
    }

    /// Small config used by unit tests.
    pub fn toy_defaults() -> Self {
        TrainConfig {
            task: Task::Denoise,
            prediction_target: PredictionTarget::X0WithVSupervision,
            schedule_mode: ScheduleMode::Sparse,
            stm: true,
            patch: (8, 8, 8),
            stride: (8, 8, 8),
            batch_size: 2,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            total_steps: 10,
            seed: 7,
            manifest: String::new(),
            checkpoint_out: String::new(),
            log_csv: String::new(),
            t_total: 100,
            k_sparse: 5,
            schedule_form: ScheduleForm::Linear,
            beta_min: default_beta_min(),
            beta_max: default_beta_max(),
            base_channels: 8,
            level_mults: vec![1, 2],
            blocks_per_level: 1,
            time_dim: 16,
            norm_groups: 4,
            log_interval: 5,
            val_count: 0,
            deterministic: true,
        }
    }
}

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub wall_clock_s: f64,
    pub loss: f64,
    pub eval_psnr: Option<f64>,
}

pub const LOG_HEADER: &str = "step,wall_clock_s,loss,eval_psnr";

/// CSV logger, flushed per row so interrupted runs stay analyzable.
pub struct TrainLogger {
    w: std::io::BufWriter<std::fs::File>,
}

impl TrainLogger {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        writeln!(w, "{LOG_HEADER}")?;
        w.flush()?;
        Ok(TrainLogger { w })
    }

    pub fn log(&mut self, row: &LogRow) -> Result<()> {
        let psnr = row.eval_psnr.map(|p| format!("{p:.4}")).unwrap_or_default();
        writeln!(
            self.w,
            "{},{:.3},{:.6},{}",
            row.step, row.wall_clock_s, row.loss, psnr
        )?;
        self.w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<(Volume, Volume)>,
    pub val: Vec<(Volume, Volume)>,
}

/// Load all pairs behind a manifest; the last `val_count` become held-out.
pub fn load_dataset(manifest_path: impl AsRef<Path>, val_count: usize) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::read(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    if manifest.pairs.is_empty() {
        return Err(invalid("manifest lists no pairs"));
    }
    if val_count >= manifest.pairs.len() {
        return Err(invalid(format!(
            "val_count {val_count} leaves no training pairs (manifest has {})",
            manifest.pairs.len()
        )));
    }
    let mut all = Vec::with_capacity(manifest.pairs.len());
    for pair in &manifest.pairs {
        let clean = read_vvol(dir.join(&pair.clean))?;
        let degraded = read_vvol(dir.join(&pair.degraded))?;
        if clean.dims() != degraded.dims() {
            return Err(invalid(format!("pair {} has mismatched dims", pair.id)));
        }
        all.push((clean, degraded));
    }
    let val = all.split_off(all.len() - val_count);
    Ok(Dataset {
        manifest,
        train: all,
        val,
    })
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Denoiser<f32>,
    pub sched: NoiseSchedule,
    pub train_sparse: Option<SparseSchedule>,
    pub sampling: SparseSchedule,
    adam: Adam<f32>,
    rng: SeededRng,
    data: Dataset,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate_shape()?;
        cfg.validate_paths()?;
        let data = load_dataset(&cfg.manifest, cfg.val_count)?;
        Self::with_dataset(cfg, data)
    }

    /// Trainer over an in-memory dataset (used by tests and harnesses).
    pub fn with_dataset(cfg: TrainConfig, data: Dataset) -> Result<Self> {
        cfg.validate_shape()?;
        let dims = data.train[0].0.dims();
        for (p, d) in [
            (cfg.patch.0, dims.0),
            (cfg.patch.1, dims.1),
            (cfg.patch.2, dims.2),
        ] {
            if p > d {
                return Err(invalid(format!(
                    "patch {:?} exceeds volume dims {dims:?}",
                    cfg.patch
                )));
            }
        }
        let mut rng = rng_from_seed(cfg.seed);
        let model = Denoiser::new(&cfg.model_config(), &mut rng)?;
        let sched = cfg.schedule()?;
        let train_sparse = match cfg.schedule_mode {
            ScheduleMode::Sparse => Some(subsample_uniform(cfg.t_total, cfg.k_sparse)?),
            ScheduleMode::Dense => None,
        };
        let sampling = cfg.sampling_schedule()?;
        let adam = Adam::new(AdamConfig {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: 1e-8,
        });
        Ok(Trainer {
            cfg,
            model,
            sched,
            train_sparse,
            sampling,
            adam,
            rng,
            data,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(self.cfg.seed, &self.rng)
    }

    fn draw_timestep(&mut self) -> usize {
        match &self.train_sparse {
            Some(s) => s.indices()[uniform_index(&mut self.rng, s.k())],
            None => 1 + uniform_index(&mut self.rng, self.cfg.t_total),
        }
    }

    /// Assemble one seeded batch: (x0, y, t). Draw order per sample is
    /// volume index, patch origin (z, y, x), then timestep, then noise.
    fn sample_batch(&mut self) -> (Array5<f32>, Array5<f32>, Vec<usize>, Array5<f32>) {
        let (pd, ph, pw) = self.cfg.patch;
        let b = self.cfg.batch_size;
        let mut x0 = Array5::<f32>::zeros((b, 1, pd, ph, pw));
        let mut y = Array5::<f32>::zeros((b, 1, pd, ph, pw));
        let mut ts = Vec::with_capacity(b);
        for n in 0..b {
            let vi = uniform_index(&mut self.rng, self.data.train.len());
            let (clean, degraded) = &self.data.train[vi];
            let (vd, vh, vw) = clean.dims();
            let oz = uniform_index(&mut self.rng, vd - pd + 1);
            let oy = uniform_index(&mut self.rng, vh - ph + 1);
            let ox = uniform_index(&mut self.rng, vw - pw + 1);
            for z in 0..pd {
                for yy in 0..ph {
                    for x in 0..pw {
                        x0[[n, 0, z, yy, x]] = clean.at(oz + z, oy + yy, ox + x);
                        y[[n, 0, z, yy, x]] = degraded.at(oz + z, oy + yy, ox + x);
                    }
                }
            }
            ts.push(self.draw_timestep());
        }
        let mut eps = Array5::<f32>::zeros((b, 1, pd, ph, pw));
        fill_standard_normal(&mut self.rng, eps.as_slice_mut().unwrap());
        (x0, y, ts, eps)
    }

    /// One optimizer update; returns the training loss.
    pub fn train_step(&mut self) -> Result<f64> {
        self.step += 1;
        let (x0, y, ts, eps) = self.sample_batch();
        let x_t = q_sample(&x0, &eps, &ts, &self.sched)?;
        let (out, cache) = self.model.forward_train(&x_t, &y, &ts)?;
        let m = out.len() as f64;

        // Loss and d(loss)/d(network output) in the supervised space.
        let (loss, d_out) = match self.cfg.prediction_target {
            PredictionTarget::X0WithVSupervision => {
                let v_true = velocity_from_def(&x0, &eps, &ts, &self.sched)?;
                let v_pred = velocity_from_x0(&x_t, &out, &ts, &self.sched)?;
                let loss = mean_squared_error(&v_true, &v_pred)?;
                // dL/dout = dL/dv_pred * (-1 / sqrt(1 - ab_t)), per sample.
                let mut d = Array5::<f32>::zeros(out.dim());
                for (n, &t) in ts.iter().enumerate() {
                    let sb = (1.0 - self.sched.alpha_bar(t)).sqrt();
                    let scale = -2.0 / (m * sb);
                    let vp = v_pred.index_axis(ndarray::Axis(0), n);
                    let vt = v_true.index_axis(ndarray::Axis(0), n);
                    let mut dn = d.index_axis_mut(ndarray::Axis(0), n);
                    ndarray::Zip::from(&mut dn)
                        .and(&vp)
                        .and(&vt)
                        .for_each(|o, &p, &tr| {
                            *o = ((p as f64 - tr as f64) * scale) as f32;
                        });
                }
                (loss, d)
            }
            PredictionTarget::VDirect => {
                let v_true = velocity_from_def(&x0, &eps, &ts, &self.sched)?;
                let loss = mean_squared_error(&v_true, &out)?;
                let d = ndarray::Zip::from(&out)
                    .and(&v_true)
                    .map_collect(|&p, &t| ((p as f64 - t as f64) * 2.0 / m) as f32);
                (loss, d)
            }
            PredictionTarget::Epsilon => {
                let loss = mean_squared_error(&eps, &out)?;
                let d = ndarray::Zip::from(&out)
                    .and(&eps)
                    .map_collect(|&p, &t| ((p as f64 - t as f64) * 2.0 / m) as f32);
                (loss, d)
            }
        };
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {}; config: {}",
                self.step,
                serde_json::to_string(&self.cfg).unwrap_or_default()
            )));
        }
        self.model.zero_grads();
        self.model.backward(&cache, &d_out);
        clip_global_norm(&mut self.model, 1.0);
        self.adam.step(&mut self.model);
        Ok(loss)
    }

    /// Mean enhanced PSNR over the held-out volumes.
    pub fn validate_psnr(&self) -> Result<f64> {
        if self.data.val.is_empty() {
            return Err(invalid("no held-out volumes configured"));
        }
        let mut acc = 0.0f64;
        for (i, (clean, degraded)) in self.data.val.iter().enumerate() {
            let enhanced = crate::pipeline::enhance_volume(
                &self.model,
                &self.sched,
                &self.sampling,
                self.cfg.prediction_target,
                degraded,
                &crate::pipeline::EnhanceOptions {
                    patch: self.cfg.patch,
                    stride: self.cfg.stride,
                    window: Window::Hann,
                    seed: self.cfg.seed ^ 0x5eed_0000 ^ i as u64,
                },
            )?;
            acc += crate::metrics::psnr(clean, &enhanced, 2.0)?;
        }
        Ok(acc / self.data.val.len() as f64)
    }

    /// Run the configured number of steps, logging every `log_interval`.
    /// Returns the logged rows.
    pub fn run(&mut self, logger: Option<&mut TrainLogger>) -> Result<Vec<LogRow>> {
        let started = Instant::now();
        let mut rows = Vec::new();
        let mut logger = logger;
        while self.step < self.cfg.total_steps {
            let loss = self.train_step()?;
            if self.step.is_multiple_of(self.cfg.log_interval) || self.step == self.cfg.total_steps
            {
                let eval_psnr = if self.cfg.val_count > 0 {
                    Some(self.validate_psnr()?)
                } else {
                    None
                };
                let row = LogRow {
                    step: self.step,
                    wall_clock_s: started.elapsed().as_secs_f64(),
                    loss,
                    eval_psnr,
                };
                if let Some(log) = logger.as_deref_mut() {
                    log.log(&row)?;
                }
                rows.push(row);
            }
        }
        Ok(rows)
    }

    /// Snapshot the current model and run state.
    pub fn checkpoint(&mut self) -> Checkpoint {
        let state = RngState::capture(self.cfg.seed, &self.rng);
        let step = self.step as u64;
        let cfg = self.cfg.clone();
        Checkpoint::capture(&mut self.model, &cfg, step, state)
    }

    pub fn save_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint().write(path)
    }
}

/// Full training entry point used by the CLI: load data, train, write the
/// checkpoint and log CSV.
pub fn run_training(cfg: &TrainConfig) -> Result<Vec<LogRow>> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut logger = TrainLogger::create(&cfg.log_csv)?;
    let rows = trainer.run(Some(&mut logger))?;
    trainer.save_checkpoint(PathBuf::from(&cfg.checkpoint_out))?;
    Ok(rows)
}
