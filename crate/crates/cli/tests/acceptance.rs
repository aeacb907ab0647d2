//! Acceptance suite: one test per criterion, printing a PASS line each.
//!
//! Run with `cargo test -p svdx-cli --test acceptance -- --nocapture` to see
//! the per-criterion lines; add `--test-threads=1` for ordered output. The
//! training-based criteria (7-10) are compute-heavy and serialize themselves
//! on a global lock so they do not thrash small machines.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ndarray::Array5;

use svdx_core::diffusion::{
    mean_squared_error, q_sample, sparse_sample, velocity_from_def, velocity_from_x0,
    x0_from_velocity, DenoiseModel, PredictionTarget,
};
use svdx_core::metrics::{hfen, psnr, psnr_from_mse, ssim3d};
use svdx_core::model::{Denoiser, ModelConfig};
use svdx_core::modulation::StmConfig;
use svdx_core::net::UNetConfig;
use svdx_core::nn::Parameterized;
use svdx_core::rng::{fill_standard_normal, rng_from_seed, uniform_f64, uniform_index};
use svdx_core::schedule::{build_cosine_schedule, build_linear_schedule, subsample_uniform};
use svdx_core::synth::{degrade_noise, gen_phantom, Manifest, PhantomSpec};
use svdx_core::train::{Dataset, ScheduleMode, TrainConfig, Trainer};
use svdx_core::volume::{extract_patches, stitch, Volume, Window};

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy_lock() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn pass(criterion: &str, detail: String) {
    println!("[PASS] {criterion}: {detail}");
}

fn max_abs_diff(a: &Array5<f32>, b: &Array5<f32>) -> f32 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max)
}

// ---------------------------------------------------------------------------
// Criterion 1: velocity algebra
// ---------------------------------------------------------------------------

#[test]
fn c01_velocity_algebra() {
    let started = Instant::now();
    let sched = build_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let mut rng = rng_from_seed(0xC1);
    let mut worst_cross = 0.0f32;
    let mut worst_round = 0.0f32;
    for _ in 0..1000 {
        let mut x0 = Array5::<f32>::zeros((1, 1, 8, 8, 8));
        let mut eps = Array5::<f32>::zeros((1, 1, 8, 8, 8));
        for v in x0.iter_mut() {
            *v = uniform_f64(&mut rng, -1.0, 1.0) as f32;
        }
        fill_standard_normal(&mut rng, eps.as_slice_mut().unwrap());
        let t = [1 + uniform_index(&mut rng, 1000)];
        let x_t = q_sample(&x0, &eps, &t, &sched).unwrap();
        let v_def = velocity_from_def(&x0, &eps, &t, &sched).unwrap();
        let v_net = velocity_from_x0(&x_t, &x0, &t, &sched).unwrap();
        worst_cross = worst_cross.max(max_abs_diff(&v_def, &v_net));
        let back = x0_from_velocity(&x_t, &v_def, &t, &sched).unwrap();
        worst_round = worst_round.max(max_abs_diff(&back, &x0));
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        worst_cross <= 1e-5,
        "cross-route max abs {worst_cross} > 1e-5"
    );
    assert!(
        worst_round <= 1e-5,
        "round-trip max abs {worst_round} > 1e-5"
    );
    assert!(elapsed < 5.0, "runtime {elapsed:.2} s exceeds 5 s");
    pass(
        "C1 velocity algebra",
        format!("1000 tuples: cross-route {worst_cross:.2e}, round-trip {worst_round:.2e}, {elapsed:.2} s"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: oracle sampler exactness
// ---------------------------------------------------------------------------

struct Oracle {
    x0: Array5<f32>,
    calls: AtomicUsize,
}

impl DenoiseModel<f32> for Oracle {
    fn predict_x0(
        &self,
        _x: &Array5<f32>,
        _y: &Array5<f32>,
        _t: usize,
    ) -> svdx_core::Result<Array5<f32>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.x0.clone())
    }
}

#[test]
fn c02_oracle_sampler_exactness() {
    let started = Instant::now();
    let mut rng = rng_from_seed(0xC2);
    let mut x0 = Array5::<f32>::zeros((1, 1, 8, 8, 8));
    for v in x0.iter_mut() {
        *v = uniform_f64(&mut rng, -0.95, 0.95) as f32;
    }
    let y = Array5::<f32>::zeros((1, 1, 8, 8, 8));
    let mut worst = 0.0f32;
    for form in ["linear", "cosine"] {
        let sched = match form {
            "linear" => build_linear_schedule(1000, 1e-4, 0.02).unwrap(),
            _ => build_cosine_schedule(1000, 1e-4, 0.02).unwrap(),
        };
        for k in [1usize, 3, 5, 10] {
            let sparse = subsample_uniform(1000, k).unwrap();
            let oracle = Oracle {
                x0: x0.clone(),
                calls: AtomicUsize::new(0),
            };
            let out = sparse_sample(&oracle, &y, &sparse, &sched, 0xC2).unwrap();
            assert_eq!(
                oracle.calls.load(Ordering::SeqCst),
                k,
                "model evaluation count"
            );
            let err = max_abs_diff(&out, &x0);
            assert!(err <= 1e-5, "{form} K={k}: max abs {err}");
            worst = worst.max(err);
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "runtime {elapsed:.2} s exceeds 5 s");
    pass(
        "C2 oracle sampler exactness",
        format!("K in {{1,3,5,10}} x {{linear,cosine}}: worst {worst:.2e}, {elapsed:.2} s"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: stitching inverse
// ---------------------------------------------------------------------------

#[test]
fn c03_stitching_inverse() {
    let started = Instant::now();
    let mut rng = rng_from_seed(0xC3);
    let mut worst = 0.0f32;
    for trial in 0..20 {
        let dims = (
            8 + uniform_index(&mut rng, 41),
            8 + uniform_index(&mut rng, 41),
            8 + uniform_index(&mut rng, 41),
        );
        let patch = (
            2 + uniform_index(&mut rng, dims.0 - 1),
            2 + uniform_index(&mut rng, dims.1 - 1),
            2 + uniform_index(&mut rng, dims.2 - 1),
        );
        let stride = (
            1 + uniform_index(&mut rng, patch.0),
            1 + uniform_index(&mut rng, patch.1),
            1 + uniform_index(&mut rng, patch.2),
        );
        let n = dims.0 * dims.1 * dims.2;
        let mut data = vec![0.0f32; n];
        for v in data.iter_mut() {
            *v = uniform_f64(&mut rng, -1.0, 1.0) as f32;
        }
        let vol = Volume::new(dims, data).unwrap();
        let window = if trial % 2 == 0 {
            Window::Hann
        } else {
            Window::Uniform
        };
        let (grid, patches) = extract_patches(&vol, patch, stride).unwrap();
        let back = stitch(&grid, &patches, window).unwrap();
        let err = vol
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(
            err <= 1e-6,
            "trial {trial} dims {dims:?} patch {patch:?} stride {stride:?}: {err}"
        );
        worst = worst.max(err);
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "runtime {elapsed:.2} s exceeds 10 s");
    pass(
        "C3 stitching inverse",
        format!("20 random configs: worst {worst:.2e}, {elapsed:.2} s"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: STM identity at initialization
// ---------------------------------------------------------------------------

fn small_model_cfg(stm: bool) -> ModelConfig {
    ModelConfig {
        unet: UNetConfig {
            base_channels: 8,
            level_mults: vec![1, 2],
            blocks_per_level: 2,
            time_dim: 32,
            norm_groups: 4,
        },
        stm: stm.then(StmConfig::default),
    }
}

#[test]
fn c04_stm_identity_at_init() {
    let mut rng = rng_from_seed(0xC4);
    let with_stm = Denoiser::<f32>::new(&small_model_cfg(true), &mut rng).unwrap();
    // Same UNet weights, no modulation.
    let mut rng_unused = rng_from_seed(1);
    let mut without = Denoiser::<f32>::new(&small_model_cfg(false), &mut rng_unused).unwrap();
    without.unet = with_stm.unet.clone();
    let mut worst = 0.0f32;
    let mut data_rng = rng_from_seed(0x1C4);
    for trial in 0..10 {
        let mut x = Array5::<f32>::zeros((1, 1, 8, 8, 8));
        let mut y = Array5::<f32>::zeros((1, 1, 8, 8, 8));
        fill_standard_normal(&mut data_rng, x.as_slice_mut().unwrap());
        fill_standard_normal(&mut data_rng, y.as_slice_mut().unwrap());
        let t = [1 + uniform_index(&mut data_rng, 1000)];
        let a = with_stm.forward(&x, &y, &t).unwrap();
        let b = without.forward(&x, &y, &t).unwrap();
        let err = max_abs_diff(&a, &b);
        assert!(err <= 1e-6, "trial {trial}: {err}");
        worst = worst.max(err);
    }
    pass(
        "C4 STM identity at init",
        format!("10 inputs: worst {worst:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: gradient correctness (f64 mode)
// ---------------------------------------------------------------------------

#[test]
fn c05_gradient_correctness_f64() {
    let started = Instant::now();
    let mut rng = rng_from_seed(0xC5);
    let cfg = ModelConfig {
        unet: UNetConfig {
            base_channels: 8,
            level_mults: vec![1, 2],
            blocks_per_level: 1,
            time_dim: 16,
            norm_groups: 4,
        },
        stm: Some(StmConfig {
            code_dim: 24,
            branch_channels: (4, 8),
            fuse_hidden: 32,
            head_hidden: 16,
        }),
    };
    let mut model = Denoiser::<f64>::new(&cfg, &mut rng).unwrap();
    model.randomize_all(0.08, &mut rng);
    let sched = build_linear_schedule(100, 1e-4, 0.02).unwrap();

    // Fixed batch: the full velocity-supervised training objective.
    let mut x0 = Array5::<f64>::zeros((2, 1, 8, 8, 8));
    let mut y = Array5::<f64>::zeros((2, 1, 8, 8, 8));
    let mut eps = Array5::<f64>::zeros((2, 1, 8, 8, 8));
    fill_standard_normal(&mut rng, x0.as_slice_mut().unwrap());
    fill_standard_normal(&mut rng, y.as_slice_mut().unwrap());
    fill_standard_normal(&mut rng, eps.as_slice_mut().unwrap());
    let ts = [20usize, 100];
    let x_t = q_sample(&x0, &eps, &ts, &sched).unwrap();
    let v_true = velocity_from_def(&x0, &eps, &ts, &sched).unwrap();

    let loss_of = |m: &Denoiser<f64>| -> f64 {
        let out = m.forward(&x_t, &y, &ts).unwrap();
        let v_pred = velocity_from_x0(&x_t, &out, &ts, &sched).unwrap();
        mean_squared_error(&v_true, &v_pred).unwrap()
    };

    let (out, cache) = model.forward_train(&x_t, &y, &ts).unwrap();
    let v_pred = velocity_from_x0(&x_t, &out, &ts, &sched).unwrap();
    let m = out.len() as f64;
    let mut d_out = Array5::<f64>::zeros(out.dim());
    for (n, &t) in ts.iter().enumerate() {
        let sb = (1.0 - sched.alpha_bar(t)).sqrt();
        let scale = -2.0 / (m * sb);
        let vp = v_pred.index_axis(ndarray::Axis(0), n);
        let vt = v_true.index_axis(ndarray::Axis(0), n);
        let mut dn = d_out.index_axis_mut(ndarray::Axis(0), n);
        ndarray::Zip::from(&mut dn)
            .and(&vp)
            .and(&vt)
            .for_each(|o, &p, &tr| {
                *o = (p - tr) * scale;
            });
    }
    model.zero_grads();
    model.backward(&cache, &d_out);

    let total = model.param_count();
    let mut picks: Vec<usize> = (0..20).map(|i| (i * 60013 + 7) % total).collect();
    picks.sort_unstable();
    picks.dedup();
    let h = 1e-3;
    let mut worst_rel = 0.0f64;
    for flat in picks {
        let mut an = 0.0;
        let mut offset = 0;
        model.visit_params("", &mut |_, p| {
            let len = p.numel();
            if flat >= offset && flat < offset + len {
                an = p.grad.as_slice().unwrap()[flat - offset];
            }
            offset += len;
        });
        let shift = |mm: &mut Denoiser<f64>, dv: f64| {
            let mut offset = 0;
            mm.visit_params("", &mut |_, p| {
                let len = p.numel();
                if flat >= offset && flat < offset + len {
                    p.value.as_slice_mut().unwrap()[flat - offset] += dv;
                }
                offset += len;
            });
        };
        // Four-point central stencil: cancels the O(h^2) truncation term.
        shift(&mut model, h);
        let lp1 = loss_of(&model);
        shift(&mut model, h);
        let lp2 = loss_of(&model);
        shift(&mut model, -3.0 * h);
        let lm1 = loss_of(&model);
        shift(&mut model, -h);
        let lm2 = loss_of(&model);
        shift(&mut model, 2.0 * h);
        let fd = (8.0 * (lp1 - lm1) - (lp2 - lm2)) / (12.0 * h);
        // Floored denominator: below ~1e-6 finite differences measure f64
        // cancellation noise, not gradient error.
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        assert!(
            rel <= 1e-5,
            "param {flat}: fd {fd:.3e} analytic {an:.3e} rel {rel:.3e}"
        );
        worst_rel = worst_rel.max(rel);
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "runtime {elapsed:.1} s exceeds 60 s");
    pass(
        "C5 gradient correctness",
        format!("20 params, f64 central differences: worst rel {worst_rel:.2e}, {elapsed:.1} s"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: metric oracles
// ---------------------------------------------------------------------------

#[test]
fn c06_metric_oracles() {
    let started = Instant::now();
    let diff = (psnr_from_mse(0.04, 2.0) - 20.0).abs();
    assert!(diff <= 1e-9, "psnr closed form off by {diff}");
    let mut rng = rng_from_seed(0xC6);
    let mut data = vec![0.0f32; 28 * 28 * 28];
    for v in data.iter_mut() {
        *v = uniform_f64(&mut rng, -1.0, 1.0) as f32;
    }
    let v = Volume::new((28, 28, 28), data).unwrap();
    assert_eq!(ssim3d(&v, &v).unwrap(), 1.0);
    assert_eq!(svdx_core::metrics::ms_ssim3d(&v, &v, 3).unwrap(), 1.0);
    assert_eq!(hfen(&v, &v).unwrap(), 0.0);
    assert!(psnr(&v, &v, 2.0).unwrap().is_infinite());
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "runtime {elapsed:.2} s exceeds 5 s");
    pass(
        "C6 metric oracles",
        format!("ssim(x,x)=1, ms_ssim(x,x)=1, hfen(x,x)=0, psnr(0.04, 2)=20 dB +- {diff:.1e}, {elapsed:.2} s"),
    );
}

// ---------------------------------------------------------------------------
// Shared helpers for the training criteria
// ---------------------------------------------------------------------------

fn synth_denoise_dataset(
    n: usize,
    dims: (usize, usize, usize),
    sigma: f64,
    base_seed: u64,
    val: usize,
) -> Dataset {
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let seed = base_seed + i as u64;
        let mut vrng = rng_from_seed(seed);
        let spec = PhantomSpec {
            dims,
            n_ellipsoids: 2 + uniform_index(&mut vrng, 4),
            n_thin_structures: 1 + uniform_index(&mut vrng, 3),
            seed,
        };
        let clean = gen_phantom(&spec).unwrap();
        let degraded = degrade_noise(&clean, sigma, seed ^ 0x9e3779b97f4a7c15).unwrap();
        pairs.push((clean, degraded));
    }
    let manifest = Manifest {
        task: "denoise".into(),
        dims,
        sigma: Some(sigma),
        factor: None,
        base_seed,
        pairs: vec![],
    };
    let val_pairs = pairs.split_off(pairs.len() - val);
    Dataset {
        manifest,
        train: pairs,
        val: val_pairs,
    }
}

fn enhance_val(trainer: &Trainer, pair: &(Volume, Volume), seed: u64) -> (f64, f64, f64) {
    let opts = svdx_core::pipeline::EnhanceOptions {
        patch: trainer.cfg.patch,
        stride: trainer.cfg.stride,
        window: Window::Hann,
        seed,
    };
    let enhanced = svdx_core::pipeline::enhance_volume(
        &trainer.model,
        &trainer.sched,
        &trainer.sampling,
        trainer.cfg.prediction_target,
        &pair.1,
        &opts,
    )
    .unwrap();
    let p = psnr(&pair.0, &enhanced, 2.0).unwrap();
    let s = ssim3d(&pair.0, &enhanced).unwrap();
    let h = hfen(&pair.0, &enhanced).unwrap();
    (p, s, h)
}

fn repo_config(name: &str) -> TrainConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    TrainConfig::read(path).expect("committed config must parse")
}

// ---------------------------------------------------------------------------
// Criterion 7: toy denoising end-to-end
// ---------------------------------------------------------------------------

#[test]
fn c07_toy_denoising_end_to_end() {
    let _guard = heavy_lock();
    let started = Instant::now();
    // Hyperparameters come from the committed config; the dataset is
    // generated in-process from its documented seed.
    let cfg = repo_config("toy_denoise.json");
    assert_eq!(cfg.patch, (16, 16, 16));
    assert_eq!(cfg.k_sparse, 5);
    assert!(cfg.stm);
    assert_eq!(cfg.schedule_mode, ScheduleMode::Sparse);

    let data = synth_denoise_dataset(200, (32, 32, 32), 0.2, 424_242, cfg.val_count);
    let input_psnr: f64 = data
        .val
        .iter()
        .map(|(c, d)| psnr(c, d, 2.0).unwrap())
        .sum::<f64>()
        / data.val.len() as f64;
    let input_hfen: f64 = data
        .val
        .iter()
        .map(|(c, d)| hfen(c, d).unwrap())
        .sum::<f64>()
        / data.val.len() as f64;

    let mut trainer = Trainer::with_dataset(cfg.clone(), data).unwrap();
    for _ in 0..cfg.total_steps {
        trainer.train_step().unwrap();
    }
    let train_time = started.elapsed().as_secs_f64();
    assert!(
        train_time < 1800.0,
        "training exceeded the 30-minute budget: {train_time:.0} s"
    );

    let val_pairs: Vec<(Volume, Volume)> = trainer.data().val.to_vec();
    let mut psnr_sum = 0.0;
    let mut hfen_sum = 0.0;
    for (i, pair) in val_pairs.iter().enumerate() {
        let (p, _, h) = enhance_val(&trainer, pair, 0xC7 ^ i as u64);
        psnr_sum += p;
        hfen_sum += h;
    }
    let n_val = val_pairs.len() as f64;
    let mean_psnr = psnr_sum / n_val;
    let mean_hfen = hfen_sum / n_val;
    let gain = mean_psnr - input_psnr;
    assert!(
        gain >= 3.0,
        "PSNR gain {gain:.2} dB below the required 3 dB ({input_psnr:.2} -> {mean_psnr:.2})"
    );
    assert!(
        mean_hfen < input_hfen,
        "HFEN did not decrease: {mean_hfen:.4} vs input {input_hfen:.4}"
    );
    pass(
        "C7 toy denoising end-to-end",
        format!(
            "20 held-out volumes: PSNR {input_psnr:.2} -> {mean_psnr:.2} dB (+{gain:.2}), HFEN {input_hfen:.4} -> {mean_hfen:.4}, train {train_time:.0} s"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8 (soft/report): convergence advantage + per-step cost parity
// ---------------------------------------------------------------------------

fn c8_config(mode: ScheduleMode, target: PredictionTarget, steps: usize) -> TrainConfig {
    let mut cfg = repo_config("toy_denoise.json");
    cfg.schedule_mode = mode;
    cfg.prediction_target = target;
    cfg.total_steps = steps;
    cfg.val_count = 2;
    cfg.log_interval = 50;
    cfg
}

#[test]
fn c08_convergence_advantage_report() {
    let _guard = heavy_lock();
    let budget_steps = 250usize;
    let data = || synth_denoise_dataset(30, (32, 32, 32), 0.2, 848_484, 2);

    // Identical step budget realizes the identical wall-clock budget: sparse
    // and dense steps differ in t-sampling only, and the parity is measured
    // below on the same prediction target.
    let mut sparse = Trainer::with_dataset(
        c8_config(
            ScheduleMode::Sparse,
            PredictionTarget::X0WithVSupervision,
            budget_steps,
        ),
        data(),
    )
    .unwrap();
    let mut dense = Trainer::with_dataset(
        c8_config(ScheduleMode::Dense, PredictionTarget::VDirect, budget_steps),
        data(),
    )
    .unwrap();

    let mut sparse_curve = Vec::new();
    let mut dense_curve = Vec::new();
    for step in 1..=budget_steps {
        sparse.train_step().unwrap();
        dense.train_step().unwrap();
        if step % 50 == 0 {
            sparse_curve.push((step, sparse.validate_psnr().unwrap()));
            dense_curve.push((step, dense.validate_psnr().unwrap()));
        }
    }
    let sparse_final = sparse_curve.last().unwrap().1;
    let dense_final = dense_curve.last().unwrap().1;
    assert!(
        sparse_final >= dense_final - 0.3,
        "sparse x0+v final PSNR {sparse_final:.2} fell more than 0.3 dB below dense v-prediction {dense_final:.2}"
    );
    let reach = sparse_curve
        .iter()
        .find(|(_, p)| *p >= dense_final)
        .map(|(s, _)| *s);
    let ratio_note = match reach {
        Some(s) => format!(
            "sparse reached the dense-final PSNR at step {s} of {budget_steps} (ratio ~{:.1}x, reported not asserted)",
            budget_steps as f64 / s as f64
        ),
        None => "sparse did not reach the dense-final PSNR within the budget".to_string(),
    };
    println!("  sparse x0+v curve: {sparse_curve:?}");
    println!("  dense v-direct curve: {dense_curve:?}");

    // Per-step cost parity (same prediction target, interleaved timing).
    let mut a = Trainer::with_dataset(
        c8_config(
            ScheduleMode::Sparse,
            PredictionTarget::X0WithVSupervision,
            10_000,
        ),
        data(),
    )
    .unwrap();
    let mut b = Trainer::with_dataset(
        c8_config(
            ScheduleMode::Dense,
            PredictionTarget::X0WithVSupervision,
            10_000,
        ),
        data(),
    )
    .unwrap();
    for _ in 0..5 {
        a.train_step().unwrap();
        b.train_step().unwrap();
    }
    let (mut ta, mut tb) = (0.0f64, 0.0f64);
    for _ in 0..40 {
        let t0 = Instant::now();
        a.train_step().unwrap();
        ta += t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        b.train_step().unwrap();
        tb += t1.elapsed().as_secs_f64();
    }
    let ratio = ta / tb;
    assert!(
        (0.95..=1.05).contains(&ratio),
        "per-step cost parity violated: sparse/dense wall-clock ratio {ratio:.3}"
    );
    pass(
        "C8 convergence advantage (soft)",
        format!(
            "sparse x0+v {sparse_final:.2} dB vs dense v-direct {dense_final:.2} dB at equal budget; {ratio_note}; step-cost ratio {ratio:.3}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9 (soft/report): step-count ablation
// ---------------------------------------------------------------------------

#[test]
fn c09_step_count_ablation() {
    let _guard = heavy_lock();
    let ks = [3usize, 5, 10, 50, 100];
    let mut table = Vec::new();
    for &k in &ks {
        let mut cfg = repo_config("toy_denoise.json");
        cfg.k_sparse = k;
        cfg.total_steps = 250;
        cfg.val_count = 4;
        cfg.stride = (16, 16, 16);
        let data = synth_denoise_dataset(44, (32, 32, 32), 0.2, 929_292, 4);
        let mut trainer = Trainer::with_dataset(cfg, data).unwrap();
        for _ in 0..250 {
            trainer.train_step().unwrap();
        }
        let val_pairs: Vec<(Volume, Volume)> = trainer.data().val.to_vec();
        let mut p_sum = 0.0;
        let mut s_sum = 0.0;
        for (i, pair) in val_pairs.iter().enumerate() {
            let (p, s, _) = enhance_val(&trainer, pair, 0xC9 ^ i as u64);
            p_sum += p;
            s_sum += s;
        }
        let n = val_pairs.len() as f64;
        table.push((k, p_sum / n, s_sum / n));
    }
    println!("  K ablation (PSNR dB / SSIM):");
    for (k, p, s) in &table {
        println!("    K={k:>3}: {p:.2} / {s:.4}");
    }
    let best = table
        .iter()
        .map(|(_, p, _)| *p)
        .fold(f64::NEG_INFINITY, f64::max);
    let k5 = table.iter().find(|(k, _, _)| *k == 5).unwrap().1;
    assert!(
        k5 >= best - 0.5,
        "K=5 PSNR {k5:.2} more than 0.5 dB below the best K ({best:.2})"
    );
    pass(
        "C9 step-count ablation (soft)",
        format!("K=5 at {k5:.2} dB within 0.5 dB of best {best:.2} dB; full table printed above"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: end-to-end CLI determinism
// ---------------------------------------------------------------------------

fn run_cli(args: &[&str], cwd: &std::path::Path) -> std::process::Output {
    let exe = env!("CARGO_BIN_EXE_svdx");
    let out = std::process::Command::new(exe)
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn svdx");
    assert!(
        out.status.success(),
        "svdx {:?} failed with {:?}\nstdout: {}\nstderr: {}",
        args,
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn dir_digest(dir: &std::path::Path) -> Vec<(String, u32)> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| {
            let bytes = std::fs::read(e.path()).unwrap();
            let mut h = crc32fast::Hasher::new();
            h.update(&bytes);
            (e.file_name().to_string_lossy().into_owned(), h.finalize())
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn c10_cli_determinism() {
    let _guard = heavy_lock();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    // synth twice -> byte-identical trees.
    run_cli(
        &[
            "synth", "--task", "denoise", "--n", "4", "--dims", "16", "--sigma", "0.2", "--seed",
            "11", "--out", "data_a",
        ],
        root,
    );
    run_cli(
        &[
            "synth", "--task", "denoise", "--n", "4", "--dims", "16", "--sigma", "0.2", "--seed",
            "11", "--out", "data_b",
        ],
        root,
    );
    let da = dir_digest(&root.join("data_a"));
    let db = dir_digest(&root.join("data_b"));
    assert!(!da.is_empty());
    assert_eq!(
        da.iter().map(|(n, c)| (n.clone(), *c)).collect::<Vec<_>>(),
        db.iter().map(|(n, c)| (n.clone(), *c)).collect::<Vec<_>>(),
        "synth outputs differ between identical runs"
    );

    // train twice with the *same* config (100 steps, deterministic mode) ->
    // identical checkpoints and logs up to wall-clock columns. Outputs are
    // moved aside between runs; the config snapshot inside the checkpoint
    // must be identical, so both runs share one config file.
    let mut cfg = TrainConfig::toy_defaults();
    cfg.total_steps = 100;
    cfg.patch = (8, 8, 8);
    cfg.stride = (8, 8, 8);
    cfg.batch_size = 2;
    cfg.val_count = 0;
    cfg.log_interval = 20;
    cfg.deterministic = true;
    cfg.manifest = "data_a/manifest.json".into();
    cfg.checkpoint_out = "model.ckpt".into();
    cfg.log_csv = "train.csv".into();
    std::fs::write(
        root.join("cfg.json"),
        serde_json::to_string_pretty(&cfg).unwrap(),
    )
    .unwrap();
    for run in ["r1", "r2"] {
        run_cli(&["train", "--config", "cfg.json"], root);
        std::fs::rename(root.join("model.ckpt"), root.join(format!("{run}.ckpt"))).unwrap();
        std::fs::rename(root.join("train.csv"), root.join(format!("{run}.csv"))).unwrap();
    }
    let ck1 = std::fs::read(root.join("r1.ckpt")).unwrap();
    let ck2 = std::fs::read(root.join("r2.ckpt")).unwrap();
    assert_eq!(ck1, ck2, "checkpoints differ between identical seeded runs");
    // Log CSVs match after dropping the wall-clock column.
    let strip = |p: &std::path::Path| -> Vec<String> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                let cols: Vec<&str> = l.split(',').collect();
                if cols.len() == 4 {
                    format!("{},{},{}", cols[0], cols[2], cols[3])
                } else {
                    l.to_string()
                }
            })
            .collect()
    };
    assert_eq!(strip(&root.join("r1.csv")), strip(&root.join("r2.csv")));

    // enhance twice -> byte-identical output volumes.
    for out in ["e1.vvol", "e2.vvol"] {
        run_cli(
            &[
                "enhance",
                "--ckpt",
                "r1.ckpt",
                "--in",
                "data_a/degraded_0000.vvol",
                "--out",
                out,
                "--seed",
                "3",
            ],
            root,
        );
    }
    let e1 = std::fs::read(root.join("e1.vvol")).unwrap();
    let e2 = std::fs::read(root.join("e2.vvol")).unwrap();
    assert_eq!(
        e1, e2,
        "enhance outputs differ between identical seeded runs"
    );
    pass(
        "C10 determinism",
        "synth, train (100 steps), and enhance are byte-identical across seeded reruns".to_string(),
    );
}
