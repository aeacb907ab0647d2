//! Rough per-step timing for config sizing. Run: cargo run --example bench_step -p svdx-core

use std::time::Instant;

use svdx_core::synth::{degrade_noise, gen_phantom, PhantomSpec};
use svdx_core::train::{Dataset, ScheduleMode, Task, TrainConfig, Trainer};

fn dataset(n: usize, dims: (usize, usize, usize)) -> Dataset {
    let mut pairs = Vec::new();
    for i in 0..n {
        let clean = gen_phantom(&PhantomSpec {
            dims,
            n_ellipsoids: 3,
            n_thin_structures: 2,
            seed: i as u64,
        })
        .unwrap();
        let deg = degrade_noise(&clean, 0.2, 1000 + i as u64).unwrap();
        pairs.push((clean, deg));
    }
    let manifest = svdx_core::synth::Manifest {
        task: "denoise".into(),
        dims,
        sigma: Some(0.2),
        factor: None,
        base_seed: 0,
        pairs: vec![],
    };
    let val = pairs.split_off(pairs.len() - 2);
    Dataset {
        manifest,
        train: pairs,
        val,
    }
}

fn main() {
    for (bc, mults, bpl, bs, patch) in [
        (8usize, vec![1usize, 2], 2usize, 4usize, 16usize),
        (8, vec![1, 2], 2, 6, 16),
        (16, vec![1, 2], 2, 4, 16),
        (8, vec![1, 2], 1, 4, 16),
    ] {
        let mut cfg = TrainConfig::toy_defaults();
        cfg.task = Task::Denoise;
        cfg.schedule_mode = ScheduleMode::Sparse;
        cfg.stm = true;
        cfg.patch = (patch, patch, patch);
        cfg.stride = (8, 8, 8);
        cfg.batch_size = bs;
        cfg.base_channels = bc;
        cfg.level_mults = mults.clone();
        cfg.blocks_per_level = bpl;
        cfg.time_dim = 64;
        cfg.norm_groups = 4;
        cfg.t_total = 1000;
        cfg.k_sparse = 5;
        let data = dataset(12, (32, 32, 32));
        let mut tr = Trainer::with_dataset(cfg, data).unwrap();
        for _ in 0..3 {
            tr.train_step().unwrap();
        }
        let t0 = Instant::now();
        let steps = 15;
        for _ in 0..steps {
            tr.train_step().unwrap();
        }
        let per = t0.elapsed().as_secs_f64() / steps as f64;
        let t1 = Instant::now();
        let p = tr.validate_psnr().unwrap();
        println!(
            "bc={bc} mults={mults:?} bpl={bpl} bs={bs} patch={patch}: {:.3} s/step, val(2 vols 32^3, patch16/stride8) {:.2} s, psnr {p:.2}",
            per,
            t1.elapsed().as_secs_f64()
        );
    }
}
