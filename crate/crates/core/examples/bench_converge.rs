//! Convergence probe: how fast the toy config reaches +3 dB over the input.

use std::time::Instant;

use svdx_core::metrics::psnr;
use svdx_core::synth::{degrade_noise, gen_phantom, PhantomSpec};
use svdx_core::train::{Dataset, ScheduleMode, Task, TrainConfig, Trainer};

fn dataset(n: usize, dims: (usize, usize, usize)) -> Dataset {
    let mut pairs = Vec::new();
    for i in 0..n {
        let mut vrng = svdx_core::rng::rng_from_seed(i as u64);
        let spec = PhantomSpec {
            dims,
            n_ellipsoids: 2 + svdx_core::rng::uniform_index(&mut vrng, 4),
            n_thin_structures: 1 + svdx_core::rng::uniform_index(&mut vrng, 3),
            seed: i as u64,
        };
        let clean = gen_phantom(&spec).unwrap();
        let deg = degrade_noise(&clean, 0.2, 0x9e3779b97f4a7c15 ^ i as u64).unwrap();
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
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2e-4);
    let bc: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1200);

    let mut cfg = TrainConfig::toy_defaults();
    cfg.task = Task::Denoise;
    cfg.schedule_mode = ScheduleMode::Sparse;
    cfg.stm = true;
    cfg.patch = (16, 16, 16);
    cfg.stride = (8, 8, 8);
    cfg.batch_size = 4;
    cfg.learning_rate = lr;
    cfg.base_channels = bc;
    cfg.level_mults = vec![1, 2];
    cfg.blocks_per_level = 2;
    cfg.time_dim = 64;
    cfg.norm_groups = 4;
    cfg.t_total = 1000;
    cfg.k_sparse = 5;
    cfg.seed = 17;
    let data = dataset(40, (32, 32, 32));
    let input_psnr: f64 = data
        .val
        .iter()
        .map(|(c, d)| psnr(c, d, 2.0).unwrap())
        .sum::<f64>()
        / data.val.len() as f64;
    println!("input psnr over val: {input_psnr:.2} dB (lr={lr}, bc={bc})");
    let mut tr = Trainer::with_dataset(cfg, data).unwrap();
    let t0 = Instant::now();
    let mut loss_acc = 0.0;
    for s in 1..=steps {
        loss_acc += tr.train_step().unwrap();
        if s % 200 == 0 {
            let p = tr.validate_psnr().unwrap();
            println!(
                "step {s}: mean loss {:.4}, val psnr {p:.2} (+{:.2} dB), {:.0} s elapsed",
                loss_acc / 200.0,
                p - input_psnr,
                t0.elapsed().as_secs_f64()
            );
            loss_acc = 0.0;
        }
    }
}
