//! Regenerates the checked-in fuzz corpus seeds.
//! Run from the repo root: cargo run --example gen_fuzz_seeds -p svdx-core

use std::path::Path;

use svdx_core::checkpoint::Checkpoint;
use svdx_core::model::Denoiser;
use svdx_core::nn::Parameterized;
use svdx_core::rng::{rng_from_seed, RngState};
use svdx_core::synth::{Manifest, PairEntry};
use svdx_core::train::TrainConfig;
use svdx_core::volume::Volume;

fn main() {
    let base = Path::new("crates/core/fuzz/corpus");

    // Valid VVOL files of a few shapes.
    let v1 = Volume::new((1, 1, 1), vec![0.5]).unwrap();
    std::fs::write(
        base.join("vvol_parse/tiny.vvol"),
        v1.to_vvol_bytes().unwrap(),
    )
    .unwrap();
    let v2 = Volume::new((2, 3, 4), (0..24).map(|i| i as f32 / 24.0).collect()).unwrap();
    std::fs::write(
        base.join("vvol_parse/small.vvol"),
        v2.to_vvol_bytes().unwrap(),
    )
    .unwrap();

    // A minimal valid checkpoint (tiny model so the seed stays small).
    let mut cfg = TrainConfig::toy_defaults();
    cfg.base_channels = 4;
    cfg.level_mults = vec![1];
    cfg.blocks_per_level = 1;
    cfg.time_dim = 4;
    cfg.norm_groups = 2;
    cfg.stm = false;
    let mut rng = rng_from_seed(0);
    let mut model = Denoiser::<f32>::new(&cfg.model_config(), &mut rng).unwrap();
    let n = model.param_count();
    let ckpt = Checkpoint::capture(&mut model, &cfg, 3, RngState::capture(0, &rng));
    let bytes = ckpt.to_bytes().unwrap();
    println!("checkpoint seed: {n} params, {} bytes", bytes.len());
    std::fs::write(base.join("checkpoint_parse/tiny.ckpt"), bytes).unwrap();

    // Train config JSON.
    let json = serde_json::to_string_pretty(&TrainConfig::toy_defaults()).unwrap();
    std::fs::write(base.join("train_config_parse/toy.json"), json).unwrap();

    // Manifest JSON.
    let m = Manifest {
        task: "denoise".into(),
        dims: (8, 8, 8),
        sigma: Some(0.2),
        factor: None,
        base_seed: 0,
        pairs: vec![PairEntry {
            id: "0000".into(),
            clean: "clean_0000.vvol".into(),
            degraded: "degraded_0000.vvol".into(),
        }],
    };
    std::fs::write(
        base.join("manifest_parse/denoise.json"),
        serde_json::to_string_pretty(&m).unwrap(),
    )
    .unwrap();
    println!("fuzz corpus seeds written under {}", base.display());
}
