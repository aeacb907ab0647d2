//! Seeded synthetic phantoms and degradation operators.
//!
//! Phantoms mix a smooth low-order polynomial background, homogeneous
//! ellipsoids, and thin structures (1-2 voxel rods and shells) so that both
//! flat regions and fine high-frequency detail are present. Everything is a
//! pure function of (spec, seed).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{format_err, invalid, Result};
use crate::rng::{normal_f64, rng_from_seed, uniform_f64, uniform_index, SeededRng};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    pub n_ellipsoids: usize,
    /// Rods and shells of 1-2 voxel thickness, alternating.
    pub n_thin_structures: usize,
    pub seed: u64,
}

/// Background polynomial coefficients are drawn from [-BG_COEF, BG_COEF].
pub const BG_COEF: f64 = 0.1;

/// Bound on the per-voxel increment of a pure-background phantom along any
/// axis: 10 monomials of degree <= 2 on [-1,1] coords, each derivative <= 2,
/// times the coefficient bound, times the voxel spacing 2/(dim-1).
pub fn smooth_gradient_bound(dims: (usize, usize, usize)) -> f32 {
    let min_dim = dims.0.min(dims.1).min(dims.2).max(2);
    (BG_COEF * 10.0 * 2.0 * 2.0 / (min_dim as f64 - 1.0)) as f32
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    value: f64,
}

struct Rod {
    axis: usize,
    a: f64,
    b: f64,
    radius: f64,
    value: f64,
}

struct Shell {
    center: [f64; 3],
    radius: f64,
    half_thickness: f64,
    value: f64,
}

/// Deterministic phantom volume in [-1, 1].
pub fn gen_phantom(spec: &PhantomSpec) -> Result<Volume> {
    let (d, h, w) = spec.dims;
    if d < 8 || h < 8 || w < 8 {
        return Err(invalid(format!(
            "phantom dims {:?} must be >= 8 per axis",
            spec.dims
        )));
    }
    let mut rng = rng_from_seed(spec.seed);

    // Degree-2 polynomial background over normalized coords in [-1, 1].
    let coefs: Vec<f64> = (0..10)
        .map(|_| uniform_f64(&mut rng, -BG_COEF, BG_COEF))
        .collect();

    let ellipsoids: Vec<Ellipsoid> = (0..spec.n_ellipsoids)
        .map(|_| Ellipsoid {
            center: [
                uniform_f64(&mut rng, 0.2, 0.8) * d as f64,
                uniform_f64(&mut rng, 0.2, 0.8) * h as f64,
                uniform_f64(&mut rng, 0.2, 0.8) * w as f64,
            ],
            radii: [
                uniform_f64(&mut rng, 0.12, 0.3) * d as f64,
                uniform_f64(&mut rng, 0.12, 0.3) * h as f64,
                uniform_f64(&mut rng, 0.12, 0.3) * w as f64,
            ],
            value: signed_intensity(&mut rng),
        })
        .collect();

    let mut rods = Vec::new();
    let mut shells = Vec::new();
    for i in 0..spec.n_thin_structures {
        if i % 2 == 0 {
            let axis = uniform_index(&mut rng, 3);
            let (da, db) = match axis {
                0 => (h, w),
                1 => (d, w),
                _ => (d, h),
            };
            rods.push(Rod {
                axis,
                a: uniform_f64(&mut rng, 0.2, 0.8) * da as f64,
                b: uniform_f64(&mut rng, 0.2, 0.8) * db as f64,
                radius: uniform_f64(&mut rng, 0.8, 1.4),
                value: signed_intensity(&mut rng),
            });
        } else {
            let min_dim = d.min(h).min(w) as f64;
            shells.push(Shell {
                center: [
                    uniform_f64(&mut rng, 0.35, 0.65) * d as f64,
                    uniform_f64(&mut rng, 0.35, 0.65) * h as f64,
                    uniform_f64(&mut rng, 0.35, 0.65) * w as f64,
                ],
                radius: uniform_f64(&mut rng, 0.2, 0.4) * min_dim,
                half_thickness: uniform_f64(&mut rng, 0.5, 1.0),
                value: signed_intensity(&mut rng),
            });
        }
    }

    let norm = |i: usize, n: usize| -> f64 {
        if n == 1 {
            0.0
        } else {
            2.0 * i as f64 / (n as f64 - 1.0) - 1.0
        }
    };
    let mut data = Vec::with_capacity(d * h * w);
    for z in 0..d {
        let uz = norm(z, d);
        for y in 0..h {
            let uy = norm(y, h);
            for x in 0..w {
                let ux = norm(x, w);
                let mut v = coefs[0]
                    + coefs[1] * ux
                    + coefs[2] * uy
                    + coefs[3] * uz
                    + coefs[4] * ux * ux
                    + coefs[5] * uy * uy
                    + coefs[6] * uz * uz
                    + coefs[7] * ux * uy
                    + coefs[8] * ux * uz
                    + coefs[9] * uy * uz;
                let (fz, fy, fx) = (z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5);
                for e in &ellipsoids {
                    let q = ((fz - e.center[0]) / e.radii[0]).powi(2)
                        + ((fy - e.center[1]) / e.radii[1]).powi(2)
                        + ((fx - e.center[2]) / e.radii[2]).powi(2);
                    if q <= 1.0 {
                        v += e.value;
                    }
                }
                for r in &rods {
                    let (pa, pb) = match r.axis {
                        0 => (fy, fx),
                        1 => (fz, fx),
                        _ => (fz, fy),
                    };
                    let dist2 = (pa - r.a).powi(2) + (pb - r.b).powi(2);
                    if dist2 <= r.radius * r.radius {
                        v += r.value;
                    }
                }
                for s in &shells {
                    let dist = ((fz - s.center[0]).powi(2)
                        + (fy - s.center[1]).powi(2)
                        + (fx - s.center[2]).powi(2))
                    .sqrt();
                    if (dist - s.radius).abs() <= s.half_thickness {
                        v += s.value;
                    }
                }
                data.push(v.clamp(-1.0, 1.0) as f32);
            }
        }
    }
    Volume::new(spec.dims, data)
}

fn signed_intensity(rng: &mut SeededRng) -> f64 {
    let mag = uniform_f64(rng, 0.25, 0.6);
    if uniform_index(rng, 2) == 0 {
        mag
    } else {
        -mag
    }
}

/// Additive Gaussian degradation: `y = clamp(x0 + sigma*n, -1, 1)`, seeded.
pub fn degrade_noise(x0: &Volume, sigma: f64, seed: u64) -> Result<Volume> {
    if sigma < 0.0 {
        return Err(invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut rng = rng_from_seed(seed);
    let data = x0
        .data()
        .iter()
        .map(|&v| ((v as f64 + sigma * normal_f64(&mut rng)).clamp(-1.0, 1.0)) as f32)
        .collect();
    Volume::new(x0.dims(), data)
}

/// Block mean-pool by `factor`, then trilinear re-upsample to the original
/// grid, so the degraded volume keeps the clean volume's shape.
pub fn degrade_downsample(x0: &Volume, factor: usize) -> Result<Volume> {
    if factor < 2 {
        return Err(invalid("downsample factor must be >= 2"));
    }
    let (d, h, w) = x0.dims();
    if d % factor != 0 || h % factor != 0 || w % factor != 0 {
        return Err(invalid(format!(
            "dims {:?} not divisible by factor {factor}",
            x0.dims()
        )));
    }
    let (cd, ch, cw) = (d / factor, h / factor, w / factor);
    // Mean pool.
    let mut coarse = vec![0.0f64; cd * ch * cw];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let ci = ((z / factor) * ch + y / factor) * cw + x / factor;
                coarse[ci] += x0.at(z, y, x) as f64;
            }
        }
    }
    let inv = 1.0 / (factor * factor * factor) as f64;
    for v in coarse.iter_mut() {
        *v *= inv;
    }
    // Trilinear upsample with voxel-center alignment and edge clamping.
    let pos = |i: usize| -> (usize, usize, f64) {
        let u = (i as f64 + 0.5) / factor as f64 - 0.5;
        if u <= 0.0 {
            (0, 0, 0.0)
        } else {
            let i0 = u.floor() as usize;
            (i0, i0 + 1, u - i0 as f64)
        }
    };
    let clampi = |i: usize, n: usize| i.min(n - 1);
    let mut data = Vec::with_capacity(d * h * w);
    for z in 0..d {
        let (z0, z1, fz) = pos(z);
        let (z0, z1) = (clampi(z0, cd), clampi(z1, cd));
        for y in 0..h {
            let (y0, y1, fy) = pos(y);
            let (y0, y1) = (clampi(y0, ch), clampi(y1, ch));
            for x in 0..w {
                let (x0i, x1i, fx) = pos(x);
                let (x0i, x1i) = (clampi(x0i, cw), clampi(x1i, cw));
                let at = |zz: usize, yy: usize, xx: usize| coarse[(zz * ch + yy) * cw + xx];
                let c00 = at(z0, y0, x0i) * (1.0 - fx) + at(z0, y0, x1i) * fx;
                let c01 = at(z0, y1, x0i) * (1.0 - fx) + at(z0, y1, x1i) * fx;
                let c10 = at(z1, y0, x0i) * (1.0 - fx) + at(z1, y0, x1i) * fx;
                let c11 = at(z1, y1, x0i) * (1.0 - fx) + at(z1, y1, x1i) * fx;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                data.push((c0 * (1.0 - fz) + c1 * fz) as f32);
            }
        }
    }
    Volume::new(x0.dims(), data)
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub clean: String,
    pub degraded: String,
}

/// JSON manifest written next to generated volume pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub task: String,
    pub dims: (usize, usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<usize>,
    pub base_seed: u64,
    pub pairs: Vec<PairEntry>,
}

impl Manifest {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let m: Manifest =
            serde_json::from_str(s).map_err(|e| format_err(format!("manifest: {e}")))?;
        if m.task != "denoise" && m.task != "superres" {
            return Err(format_err(format!(
                "manifest task must be denoise|superres, got {}",
                m.task
            )));
        }
        Ok(m)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path.as_ref())?;
        Self::from_json_str(&s)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| format_err(e.to_string()))?;
        std::fs::write(path.as_ref(), s)?;
        Ok(())
    }
}

/// Generate `n` (clean, degraded) pairs under `out_dir` plus a manifest.
/// Per-volume seeds are `base_seed + index`; structure counts are drawn from
/// each volume's own stream.
pub fn generate_dataset(
    task: &str,
    n: usize,
    dims: (usize, usize, usize),
    sigma: f64,
    factor: usize,
    base_seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    if task != "denoise" && task != "superres" {
        return Err(invalid(format!(
            "task must be denoise|superres, got {task}"
        )));
    }
    if n == 0 {
        return Err(invalid("need at least one volume"));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
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
        let clean = gen_phantom(&spec)?;
        let degraded = match task {
            "denoise" => degrade_noise(&clean, sigma, seed ^ 0x9e3779b97f4a7c15)?,
            _ => degrade_downsample(&clean, factor)?,
        };
        let clean_name = format!("clean_{i:04}.vvol");
        let degraded_name = format!("degraded_{i:04}.vvol");
        crate::volume::write_vvol(&clean, out_dir.join(&clean_name))?;
        crate::volume::write_vvol(&degraded, out_dir.join(&degraded_name))?;
        pairs.push(PairEntry {
            id: format!("{i:04}"),
            clean: clean_name,
            degraded: degraded_name,
        });
    }
    let manifest = Manifest {
        task: task.to_string(),
        dims,
        sigma: (task == "denoise").then_some(sigma),
        factor: (task == "superres").then_some(factor),
        base_seed,
        pairs,
    };
    manifest.write(out_dir.join("manifest.json"))?;
    Ok(manifest)
}
