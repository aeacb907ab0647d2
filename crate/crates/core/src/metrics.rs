//! Volumetric quality metrics: PSNR, SSIM, MS-SSIM, HFEN.
//!
//! All reductions accumulate in f64. Volumes are assumed normalized to
//! [-1, 1], so the default PSNR peak is 2 and the SSIM stabilizers use L = 2.

use std::io::Write;
use std::path::Path;

use crate::error::{invalid, shape_err, Result};
use crate::volume::Volume;

pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.0004; // (0.01 * 2)^2
const SSIM_C2: f64 = 0.0036; // (0.03 * 2)^2

/// Standard MS-SSIM scale weights; the first `scales` entries are
/// renormalized to sum to 1.
const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

pub const HFEN_SIGMA: f64 = 1.5;
pub const HFEN_SUPPORT: usize = 9;

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub hfen: f64,
}

fn check_dims(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `10 log10(peak^2 / mse)`; infinite when mse is 0.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn mse(reference: &Volume, pred: &Volume) -> Result<f64> {
    check_dims(reference, pred)?;
    let acc: f64 = reference
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(acc / reference.len() as f64)
}

pub fn psnr(reference: &Volume, pred: &Volume, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(invalid("peak must be positive"));
    }
    Ok(psnr_from_mse(mse(reference, pred)?, peak))
}

// ---------------------------------------------------------------------------
// SSIM via summed-volume tables
// ---------------------------------------------------------------------------

/// Summed-volume table: svt[z][y][x] = sum of f over the box [0,z) x [0,y) x [0,x).
struct Svt {
    dims: (usize, usize, usize),
    t: Vec<f64>,
}

impl Svt {
    fn build(dims: (usize, usize, usize), f: impl Fn(usize) -> f64) -> Self {
        let (d, h, w) = dims;
        let (sh, sw) = (h + 1, w + 1);
        let mut t = vec![0.0f64; (d + 1) * sh * sw];
        for z in 0..d {
            for y in 0..h {
                let mut row = 0.0f64;
                for x in 0..w {
                    row += f((z * h + y) * w + x);
                    let idx = ((z + 1) * sh + (y + 1)) * sw + (x + 1);
                    t[idx] = row
                        + t[(z * sh + (y + 1)) * sw + (x + 1)]
                        + t[((z + 1) * sh + y) * sw + (x + 1)]
                        - t[(z * sh + y) * sw + (x + 1)];
                }
            }
        }
        Svt { dims, t }
    }

    /// Sum over the window starting at (z, y, x) with side `k`.
    fn window(&self, z: usize, y: usize, x: usize, k: usize) -> f64 {
        let (_, h, w) = self.dims;
        let (sh, sw) = (h + 1, w + 1);
        let at = |zz: usize, yy: usize, xx: usize| self.t[(zz * sh + yy) * sw + xx];
        at(z + k, y + k, x + k) - at(z, y + k, x + k) - at(z + k, y, x + k) - at(z + k, y + k, x)
            + at(z, y, x + k)
            + at(z, y + k, x)
            + at(z + k, y, x)
            - at(z, y, x)
    }
}

struct SsimSums {
    luminance_times_cs: f64,
    cs: f64,
    luminance: f64,
    count: usize,
}

fn ssim_sums(reference: &Volume, pred: &Volume, window: usize) -> Result<SsimSums> {
    check_dims(reference, pred)?;
    let (d, h, w) = reference.dims();
    if d < window || h < window || w < window {
        return Err(invalid(format!(
            "dims {:?} smaller than the {window}^3 SSIM window",
            reference.dims()
        )));
    }
    let a = reference.data();
    let b = pred.data();
    let sa = Svt::build(reference.dims(), |i| a[i] as f64);
    let sb = Svt::build(reference.dims(), |i| b[i] as f64);
    let saa = Svt::build(reference.dims(), |i| (a[i] as f64) * (a[i] as f64));
    let sbb = Svt::build(reference.dims(), |i| (b[i] as f64) * (b[i] as f64));
    let sab = Svt::build(reference.dims(), |i| (a[i] as f64) * (b[i] as f64));
    let m = (window * window * window) as f64;
    let mut sums = SsimSums {
        luminance_times_cs: 0.0,
        cs: 0.0,
        luminance: 0.0,
        count: 0,
    };
    for z in 0..=d - window {
        for y in 0..=h - window {
            for x in 0..=w - window {
                let mu_a = sa.window(z, y, x, window) / m;
                let mu_b = sb.window(z, y, x, window) / m;
                let var_a = saa.window(z, y, x, window) / m - mu_a * mu_a;
                let var_b = sbb.window(z, y, x, window) / m - mu_b * mu_b;
                let cov = sab.window(z, y, x, window) / m - mu_a * mu_b;
                let l = (2.0 * mu_a * mu_b + SSIM_C1) / (mu_a * mu_a + mu_b * mu_b + SSIM_C1);
                let cs = (2.0 * cov + SSIM_C2) / (var_a + var_b + SSIM_C2);
                sums.luminance_times_cs += l * cs;
                sums.cs += cs;
                sums.luminance += l;
                sums.count += 1;
            }
        }
    }
    Ok(sums)
}

/// Mean local SSIM over all valid 7^3 uniform windows.
pub fn ssim3d(reference: &Volume, pred: &Volume) -> Result<f64> {
    let s = ssim_sums(reference, pred, SSIM_WINDOW)?;
    Ok(s.luminance_times_cs / s.count as f64)
}

fn mean_pool2(v: &Volume) -> Result<Volume> {
    let (d, h, w) = v.dims();
    let (cd, ch, cw) = (d / 2, h / 2, w / 2);
    if cd == 0 || ch == 0 || cw == 0 {
        return Err(invalid("volume too small to downsample"));
    }
    let mut data = vec![0.0f32; cd * ch * cw];
    for z in 0..cd {
        for y in 0..ch {
            for x in 0..cw {
                let mut acc = 0.0f64;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += v.at(2 * z + dz, 2 * y + dy, 2 * x + dx) as f64;
                        }
                    }
                }
                data[(z * ch + y) * cw + x] = (acc / 8.0) as f32;
            }
        }
    }
    Volume::new((cd, ch, cw), data)
}

/// Multi-scale SSIM: mean contrast-structure terms at the finer scales, full
/// SSIM at the coarsest, weighted by the renormalized standard weights.
/// With `scales = 1` this equals [`ssim3d`].
pub fn ms_ssim3d(reference: &Volume, pred: &Volume, scales: usize) -> Result<f64> {
    if scales < 1 || scales > MSSSIM_WEIGHTS.len() {
        return Err(invalid(format!(
            "scales must be in 1..={}",
            MSSSIM_WEIGHTS.len()
        )));
    }
    // Validate that the window fits at every scale before computing anything.
    {
        let (mut d, mut h, mut w) = reference.dims();
        for s in 0..scales {
            if d < SSIM_WINDOW || h < SSIM_WINDOW || w < SSIM_WINDOW {
                return Err(invalid(format!(
                    "scale {s}: dims ({d},{h},{w}) below the SSIM window"
                )));
            }
            if s + 1 < scales {
                d /= 2;
                h /= 2;
                w /= 2;
            }
        }
    }
    let wsum: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    let mut a = reference.clone();
    let mut b = pred.clone();
    let mut out = 1.0f64;
    for s in 0..scales {
        let weight = MSSSIM_WEIGHTS[s] / wsum;
        let sums = ssim_sums(&a, &b, SSIM_WINDOW)?;
        if s + 1 == scales {
            let ssim = sums.luminance_times_cs / sums.count as f64;
            out *= ssim.max(0.0).powf(weight);
        } else {
            let cs = sums.cs / sums.count as f64;
            out *= cs.max(0.0).powf(weight);
            a = mean_pool2(&a)?;
            b = mean_pool2(&b)?;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// HFEN
// ---------------------------------------------------------------------------

/// Zero-sum 3D Laplacian-of-Gaussian kernel, sigma 1.5, 9^3 support.
fn log_kernel() -> Vec<f64> {
    let r = (HFEN_SUPPORT / 2) as isize;
    let s2 = HFEN_SIGMA * HFEN_SIGMA;
    let mut k = Vec::with_capacity(HFEN_SUPPORT.pow(3));
    for z in -r..=r {
        for y in -r..=r {
            for x in -r..=r {
                let r2 = (z * z + y * y + x * x) as f64;
                k.push((r2 / s2 - 3.0) * (-r2 / (2.0 * s2)).exp());
            }
        }
    }
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    for v in k.iter_mut() {
        *v -= mean;
    }
    k
}

fn log_filter(v: &Volume) -> Vec<f64> {
    let (d, h, w) = v.dims();
    let k = log_kernel();
    let r = (HFEN_SUPPORT / 2) as isize;
    let mut out = vec![0.0f64; d * h * w];
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0f64;
                let mut ki = 0usize;
                for dz in -r..=r {
                    let zz = z + dz;
                    if zz < 0 || zz >= d as isize {
                        ki += HFEN_SUPPORT * HFEN_SUPPORT;
                        continue;
                    }
                    for dy in -r..=r {
                        let yy = y + dy;
                        if yy < 0 || yy >= h as isize {
                            ki += HFEN_SUPPORT;
                            continue;
                        }
                        let base = ((zz as usize) * h + yy as usize) * w;
                        for dx in -r..=r {
                            let xx = x + dx;
                            if xx >= 0 && xx < w as isize {
                                acc += k[ki] * v.data()[base + xx as usize] as f64;
                            }
                            ki += 1;
                        }
                    }
                }
                out[((z as usize) * h + y as usize) * w + x as usize] = acc;
            }
        }
    }
    out
}

fn hfen_from_filtered(fa: &[f64], fb: &[f64]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (a, b) in fa.iter().zip(fb) {
        num += (b - a) * (b - a);
        den += a * a;
    }
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}

/// Relative L2 distance between LoG-filtered volumes (zero padding).
pub fn hfen(reference: &Volume, pred: &Volume) -> Result<f64> {
    check_dims(reference, pred)?;
    let (d, h, w) = reference.dims();
    if d < HFEN_SUPPORT || h < HFEN_SUPPORT || w < HFEN_SUPPORT {
        return Err(invalid(format!(
            "dims {:?} below the LoG support",
            reference.dims()
        )));
    }
    let fa = log_filter(reference);
    let fb = log_filter(pred);
    Ok(hfen_from_filtered(&fa, &fb))
}

/// HFEN evaluated on the interior only, trimming `margin` voxels per side;
/// removes zero-padding boundary effects.
pub fn hfen_interior(reference: &Volume, pred: &Volume, margin: usize) -> Result<f64> {
    check_dims(reference, pred)?;
    let (d, h, w) = reference.dims();
    if d <= 2 * margin || h <= 2 * margin || w <= 2 * margin {
        return Err(invalid("margin leaves no interior"));
    }
    let fa = log_filter(reference);
    let fb = log_filter(pred);
    let mut ia = Vec::new();
    let mut ib = Vec::new();
    for z in margin..d - margin {
        for y in margin..h - margin {
            for x in margin..w - margin {
                let i = (z * h + y) * w + x;
                ia.push(fa[i]);
                ib.push(fb[i]);
            }
        }
    }
    Ok(hfen_from_filtered(&ia, &ib))
}

// ---------------------------------------------------------------------------
// Batch evaluation
// ---------------------------------------------------------------------------

pub fn evaluate_pair(id: &str, reference: &Volume, pred: &Volume) -> Result<MetricReport> {
    Ok(MetricReport {
        id: id.to_string(),
        psnr: psnr(reference, pred, 2.0)?,
        ssim: ssim3d(reference, pred)?,
        ms_ssim: ms_ssim3d(reference, pred, 3)?,
        hfen: hfen(reference, pred)?,
    })
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// CSV with one row per pair and a trailing mean row.
pub fn write_csv(reports: &[MetricReport], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(f, "id,psnr,ssim,ms_ssim,hfen")?;
    let n = reports.len().max(1) as f64;
    let (mut sp, mut ss, mut sm, mut sh) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for r in reports {
        writeln!(
            f,
            "{},{},{:.6},{:.6},{:.6}",
            r.id,
            fmt_db(r.psnr),
            r.ssim,
            r.ms_ssim,
            r.hfen
        )?;
        sp += r.psnr;
        ss += r.ssim;
        sm += r.ms_ssim;
        sh += r.hfen;
    }
    writeln!(
        f,
        "mean,{},{:.6},{:.6},{:.6}",
        fmt_db(sp / n),
        ss / n,
        sm / n,
        sh / n
    )?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_f64, rng_from_seed};
    use crate::synth::{degrade_noise, gen_phantom, PhantomSpec};

    fn random_volume(dims: (usize, usize, usize), seed: u64, scale: f64) -> Volume {
        let mut rng = rng_from_seed(seed);
        let n = dims.0 * dims.1 * dims.2;
        let data = (0..n)
            .map(|_| ((normal_f64(&mut rng) * scale) as f32).clamp(-1.0, 1.0))
            .collect();
        Volume::new(dims, data).unwrap()
    }

    #[test]
    fn psnr_closed_form_and_sentinel() {
        assert!((psnr_from_mse(0.04, 2.0) - 20.0).abs() < 1e-9);
        assert!(psnr_from_mse(0.0, 2.0).is_infinite());
        assert!((psnr_from_mse(4.0, 2.0) - 0.0).abs() < 1e-12);
        let v = random_volume((8, 8, 8), 1, 0.3);
        assert!(psnr(&v, &v, 2.0).unwrap().is_infinite());
        // Constant offset 0.2 -> MSE ~0.04 -> ~20 dB (f32 offset, looser tol).
        let shifted = Volume::new(v.dims(), v.data().iter().map(|&x| x + 0.2).collect()).unwrap();
        let p = psnr(&v, &shifted, 2.0).unwrap();
        assert!((p - 20.0).abs() < 1e-4, "psnr {p}");
    }

    #[test]
    fn ssim_self_is_exactly_one() {
        let v = random_volume((10, 9, 11), 2, 0.4);
        assert_eq!(ssim3d(&v, &v).unwrap(), 1.0);
        assert_eq!(ms_ssim3d(&v, &v, 1).unwrap(), 1.0);
        let big = random_volume((28, 28, 28), 3, 0.4);
        assert_eq!(ms_ssim3d(&big, &big, 2).unwrap(), 1.0);
    }

    #[test]
    fn ssim_negated_volume_is_negative() {
        let v = random_volume((12, 12, 12), 4, 0.4);
        // Zero-mean it so negation flips covariance hard.
        let m = v.mean() as f32;
        let v = Volume::new(v.dims(), v.data().iter().map(|&x| x - m).collect()).unwrap();
        let neg = Volume::new(v.dims(), v.data().iter().map(|&x| -x).collect()).unwrap();
        assert!(ssim3d(&v, &neg).unwrap() < 0.0);
    }

    #[test]
    fn ssim_constant_offset_monotone() {
        let v = random_volume((12, 12, 12), 5, 0.3);
        let mut prev = 0.0;
        for (i, c) in [0.5f32, 0.1, 0.01].iter().enumerate() {
            let shifted = Volume::new(v.dims(), v.data().iter().map(|&x| x + c).collect()).unwrap();
            let s = ssim3d(&v, &shifted).unwrap();
            assert!(s < 1.0);
            if i > 0 {
                assert!(s > prev, "ssim must increase as the offset shrinks");
            }
            prev = s;
        }
    }

    #[test]
    fn ms_ssim_single_scale_matches_ssim_and_decreases_with_noise() {
        let v = random_volume((16, 16, 16), 6, 0.3);
        let n = degrade_noise(&v, 0.05, 99).unwrap();
        let a = ms_ssim3d(&v, &n, 1).unwrap();
        let b = ssim3d(&v, &n).unwrap();
        assert!((a - b).abs() < 1e-9);
        let clean = gen_phantom(&PhantomSpec {
            dims: (16, 16, 16),
            n_ellipsoids: 3,
            n_thin_structures: 2,
            seed: 8,
        })
        .unwrap();
        let n1 = degrade_noise(&clean, 0.1, 1).unwrap();
        let n2 = degrade_noise(&clean, 0.2, 1).unwrap();
        assert!(
            ms_ssim3d(&clean, &n1, 2).unwrap() > ms_ssim3d(&clean, &n2, 2).unwrap(),
            "ms-ssim must decrease with stronger noise"
        );
    }

    #[test]
    fn hfen_identities() {
        let v = random_volume((12, 12, 12), 7, 0.4);
        assert_eq!(hfen(&v, &v).unwrap(), 0.0);
        // Constant offsets are rejected by the zero-sum LoG in the interior.
        let shifted = Volume::new(v.dims(), v.data().iter().map(|&x| x + 0.3).collect()).unwrap();
        let h = hfen_interior(&v, &shifted, 4).unwrap();
        assert!(h <= 1e-3, "interior hfen under constant shift: {h}");
    }

    #[test]
    fn hfen_detects_blur() {
        let clean = gen_phantom(&PhantomSpec {
            dims: (16, 16, 16),
            n_ellipsoids: 1,
            n_thin_structures: 3,
            seed: 10,
        })
        .unwrap();
        // 3-voxel box blur (clamped at boundaries).
        let (d, h, w) = clean.dims();
        let mut blurred = vec![0.0f32; clean.len()];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f64;
                    let mut cnt = 0.0f64;
                    for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let (zz, yy, xx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                                if zz >= 0
                                    && zz < d as i64
                                    && yy >= 0
                                    && yy < h as i64
                                    && xx >= 0
                                    && xx < w as i64
                                {
                                    acc += clean.at(zz as usize, yy as usize, xx as usize) as f64;
                                    cnt += 1.0;
                                }
                            }
                        }
                    }
                    blurred[(z * h + y) * w + x] = (acc / cnt) as f32;
                }
            }
        }
        let blurred = Volume::new(clean.dims(), blurred).unwrap();
        let score = hfen(&clean, &blurred).unwrap();
        assert!(
            score > 0.05,
            "blur must register as high-frequency loss: {score}"
        );
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let clean = gen_phantom(&PhantomSpec {
            dims: (16, 16, 16),
            n_ellipsoids: 2,
            n_thin_structures: 1,
            seed: 11,
        })
        .unwrap();
        let mut prev = f64::INFINITY;
        for sigma in [0.05, 0.1, 0.2] {
            let noisy = degrade_noise(&clean, sigma, 13).unwrap();
            let p = psnr(&clean, &noisy, 2.0).unwrap();
            assert!(p < prev, "psnr must decrease with sigma");
            prev = p;
        }
    }

    #[test]
    fn csv_format_contract() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let v = random_volume((28, 28, 28), 14, 0.3);
        let r1 = evaluate_pair("a", &v, &v).unwrap();
        write_csv(&[r1], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "id,psnr,ssim,ms_ssim,hfen");
        let row = lines.next().unwrap();
        assert!(
            row.starts_with("a,inf,1.000000,1.000000,0.000000"),
            "row: {row}"
        );
        let mean = lines.next().unwrap();
        assert!(mean.starts_with("mean,inf,"), "mean row: {mean}");
    }
}
