//! Property tests for the format, patching, schedule and diffusion-algebra
//! invariants.

use ndarray::Array5;
use proptest::prelude::*;

use svdx_core::diffusion::{
    mean_squared_error, q_sample, velocity_from_def, velocity_from_x0, x0_from_velocity,
};
use svdx_core::schedule::{build_linear_schedule, subsample_uniform};
use svdx_core::volume::{extract_patches, stitch, Volume, Window};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vvol_roundtrip_bit_exact(
        d in 1usize..5,
        h in 1usize..5,
        w in 1usize..5,
        seed in any::<u64>(),
    ) {
        let n = d * h * w;
        let mut rng = svdx_core::rng::rng_from_seed(seed);
        let data: Vec<f32> = (0..n)
            .map(|_| (svdx_core::rng::uniform_f64(&mut rng, -1e6, 1e6)) as f32)
            .collect();
        let v = Volume::new((d, h, w), data).unwrap();
        let bytes = v.to_vvol_bytes().unwrap();
        prop_assert_eq!(bytes.len(), 24 + 4 * n);
        let back = Volume::from_vvol_bytes(&bytes).unwrap();
        prop_assert_eq!(v.dims(), back.dims());
        // Bit-exact: compare the raw bit patterns.
        let bits_a: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
        let bits_b: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn patch_cover_and_stitch_identity(
        dims in (4usize..16, 4usize..16, 4usize..16),
        pfrac in (1usize..=16, 1usize..=16, 1usize..=16),
        sfrac in (1usize..=16, 1usize..=16, 1usize..=16),
        seed in any::<u64>(),
        hann in any::<bool>(),
    ) {
        let patch = (
            1 + pfrac.0 % dims.0,
            1 + pfrac.1 % dims.1,
            1 + pfrac.2 % dims.2,
        );
        let stride = (
            1 + sfrac.0 % patch.0,
            1 + sfrac.1 % patch.1,
            1 + sfrac.2 % patch.2,
        );
        let n = dims.0 * dims.1 * dims.2;
        let mut rng = svdx_core::rng::rng_from_seed(seed);
        let data: Vec<f32> = (0..n)
            .map(|_| svdx_core::rng::uniform_f64(&mut rng, -1.0, 1.0) as f32)
            .collect();
        let v = Volume::new(dims, data).unwrap();
        let (grid, patches) = extract_patches(&v, patch, stride).unwrap();

        // Coverage: every voxel inside at least one patch.
        let mut covered = vec![false; n];
        for &(oz, oy, ox) in grid.origins() {
            for z in oz..oz + patch.0 {
                for y in oy..oy + patch.1 {
                    for x in ox..ox + patch.2 {
                        covered[(z * dims.1 + y) * dims.2 + x] = true;
                    }
                }
            }
        }
        prop_assert!(covered.iter().all(|&c| c));

        // Partition of unity: unmodified patches stitch back to the volume.
        let window = if hann { Window::Hann } else { Window::Uniform };
        let back = stitch(&grid, &patches, window).unwrap();
        let max_err = v
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        prop_assert!(max_err <= 1e-6, "stitch error {}", max_err);
    }

    #[test]
    fn sparse_subset_shape(t in 1usize..2000, kfrac in 1usize..2000) {
        let k = 1 + kfrac % t;
        let s = subsample_uniform(t, k).unwrap();
        let idx = s.indices();
        prop_assert_eq!(idx.len(), k);
        prop_assert_eq!(*idx.last().unwrap(), t);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| (1..=t).contains(&i)));
        if idx.len() >= 2 {
            let gaps: Vec<usize> = idx.windows(2).map(|w| w[1] - w[0]).collect();
            prop_assert!(gaps.iter().max().unwrap() - gaps.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn velocity_routes_agree_and_invert(
        seed in any::<u64>(),
        t in 1usize..=1000,
    ) {
        let sched = build_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let mut rng = svdx_core::rng::rng_from_seed(seed);
        let mut x0 = Array5::<f32>::zeros((1, 1, 4, 4, 4));
        let mut eps = Array5::<f32>::zeros((1, 1, 4, 4, 4));
        for v in x0.iter_mut() {
            *v = svdx_core::rng::uniform_f64(&mut rng, -1.0, 1.0) as f32;
        }
        svdx_core::rng::fill_standard_normal(&mut rng, eps.as_slice_mut().unwrap());
        let ts = [t];
        let x_t = q_sample(&x0, &eps, &ts, &sched).unwrap();
        let v_def = velocity_from_def(&x0, &eps, &ts, &sched).unwrap();
        let v_net = velocity_from_x0(&x_t, &x0, &ts, &sched).unwrap();
        let cross = v_def
            .iter()
            .zip(v_net.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        prop_assert!(cross <= 1e-5, "cross-route {}", cross);
        let back = x0_from_velocity(&x_t, &v_def, &ts, &sched).unwrap();
        let round = back
            .iter()
            .zip(x0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        prop_assert!(round <= 1e-5, "round-trip {}", round);
    }

    #[test]
    fn loss_is_a_premetric_under_permutation(
        vals in proptest::collection::vec(-10.0f64..10.0, 8),
        perm_seed in any::<u64>(),
    ) {
        let truth = Array5::from_shape_vec((4, 1, 1, 1, 2), vals.clone()).unwrap();
        let pred = truth.mapv(|v| v + 0.5);
        let l = mean_squared_error(&truth, &pred).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(mean_squared_error(&truth, &truth).unwrap(), 0.0);
        // Permuting batch elements jointly leaves the loss unchanged.
        let mut order: Vec<usize> = (0..4).collect();
        let mut rng = svdx_core::rng::rng_from_seed(perm_seed);
        for i in (1..4).rev() {
            let j = svdx_core::rng::uniform_index(&mut rng, i + 1);
            order.swap(i, j);
        }
        let mut truth_p = Array5::zeros(truth.dim());
        let mut pred_p = Array5::zeros(pred.dim());
        for (dst, &src) in order.iter().enumerate() {
            truth_p
                .index_axis_mut(ndarray::Axis(0), dst)
                .assign(&truth.index_axis(ndarray::Axis(0), src));
            pred_p
                .index_axis_mut(ndarray::Axis(0), dst)
                .assign(&pred.index_axis(ndarray::Axis(0), src));
        }
        let lp = mean_squared_error(&truth_p, &pred_p).unwrap();
        prop_assert!((l - lp).abs() <= 1e-12);
    }
}

#[test]
fn loss_zero_iff_equal() {
    let a = Array5::from_shape_vec((1, 1, 1, 1, 2), vec![0.25f64, -0.5]).unwrap();
    assert_eq!(mean_squared_error(&a, &a).unwrap(), 0.0);
    let b = Array5::from_shape_vec((1, 1, 1, 1, 2), vec![0.25f64, -0.5 + 1e-9]).unwrap();
    assert!(mean_squared_error(&a, &b).unwrap() > 0.0);
}

/// Two structurally different phantoms yield distinct structural codes under
/// a fixed random initialization.
#[test]
fn structural_codes_separate_sphere_from_shell() {
    use svdx_core::modulation::{StmConfig, StructureEncoder};
    let mut rng = svdx_core::rng::rng_from_seed(99);
    let enc = StructureEncoder::<f32>::new(&StmConfig::default(), &mut rng);
    // Uniform sphere (one fat ellipsoid) vs thin shell, same seed.
    let sphere = svdx_core::synth::gen_phantom(&svdx_core::synth::PhantomSpec {
        dims: (16, 16, 16),
        n_ellipsoids: 1,
        n_thin_structures: 0,
        seed: 5,
    })
    .unwrap();
    let shell = svdx_core::synth::gen_phantom(&svdx_core::synth::PhantomSpec {
        dims: (16, 16, 16),
        n_ellipsoids: 0,
        n_thin_structures: 2,
        seed: 5,
    })
    .unwrap();
    let to_tensor = |v: &svdx_core::volume::Volume| {
        Array5::from_shape_vec((1, 1, 16, 16, 16), v.data().to_vec()).unwrap()
    };
    let ca = enc.encode(&to_tensor(&sphere)).unwrap();
    let cb = enc.encode(&to_tensor(&shell)).unwrap();
    let dot: f64 = ca
        .iter()
        .zip(cb.iter())
        .map(|(a, b)| (*a as f64) * (*b as f64))
        .sum();
    let na: f64 = ca.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = cb.iter().map(|b| (*b as f64).powi(2)).sum::<f64>().sqrt();
    let cos = dot / (na * nb);
    assert!(cos < 0.999, "codes collapsed: cosine {cos}");
}

/// The checked-in fuzz corpus seeds must stay parseable by the code they
/// seed; regenerate them with `cargo run --example gen_fuzz_seeds` if a
/// format changes.
#[test]
fn fuzz_corpus_seeds_parse() {
    let base = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus");
    let mut seen = 0;
    for entry in std::fs::read_dir(base.join("vvol_parse")).unwrap() {
        let bytes = std::fs::read(entry.unwrap().path()).unwrap();
        Volume::from_vvol_bytes(&bytes).unwrap();
        seen += 1;
    }
    for entry in std::fs::read_dir(base.join("checkpoint_parse")).unwrap() {
        let bytes = std::fs::read(entry.unwrap().path()).unwrap();
        svdx_core::checkpoint::Checkpoint::from_bytes(&bytes).unwrap();
        seen += 1;
    }
    for entry in std::fs::read_dir(base.join("train_config_parse")).unwrap() {
        let text = std::fs::read_to_string(entry.unwrap().path()).unwrap();
        svdx_core::train::TrainConfig::from_json_str(&text).unwrap();
        seen += 1;
    }
    for entry in std::fs::read_dir(base.join("manifest_parse")).unwrap() {
        let text = std::fs::read_to_string(entry.unwrap().path()).unwrap();
        svdx_core::synth::Manifest::from_json_str(&text).unwrap();
        seen += 1;
    }
    assert!(seen >= 5, "corpus unexpectedly small: {seen} seeds");
}
