//! Group normalization over (N, C, D, H, W) tensors.

use ndarray::{Array2, Array5};

use super::param::{join, Param, ParamVisitor, Parameterized};
use super::Scalar;

const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GroupNorm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    channels: usize,
    groups: usize,
}

pub struct GroupNormCache<T: Scalar> {
    xhat: Array5<T>,
    rstd: Array2<f64>,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(
            groups >= 1 && channels.is_multiple_of(groups),
            "channels {channels} not divisible by groups {groups}"
        );
        let mut gamma = Param::zeros(&[channels]);
        gamma.value.fill(T::one());
        GroupNorm {
            gamma,
            beta: Param::zeros(&[channels]),
            channels,
            groups,
        }
    }

    fn normalize(&self, x: &Array5<T>) -> (Array5<T>, Array2<f64>) {
        let (n, c, d, h, w) = x.dim();
        assert_eq!(c, self.channels, "groupnorm channels");
        let cg = c / self.groups;
        let m = (cg * d * h * w) as f64;
        let mut xhat = Array5::zeros(x.dim());
        let mut rstd = Array2::zeros((n, self.groups));
        for in_ in 0..n {
            for g in 0..self.groups {
                let sl = ndarray::s![in_, g * cg..(g + 1) * cg, .., .., ..];
                let xv = x.slice(sl);
                let mut mean = 0.0f64;
                for &v in xv.iter() {
                    mean += v.as_f64();
                }
                mean /= m;
                let mut var = 0.0f64;
                for &v in xv.iter() {
                    let dvi = v.as_f64() - mean;
                    var += dvi * dvi;
                }
                var /= m;
                let r = 1.0 / (var + GN_EPS).sqrt();
                rstd[[in_, g]] = r;
                let mut hv = xhat.slice_mut(sl);
                ndarray::Zip::from(&mut hv).and(&xv).for_each(|o, &v| {
                    *o = T::from_f64((v.as_f64() - mean) * r);
                });
            }
        }
        (xhat, rstd)
    }

    fn scale_shift(&self, xhat: &Array5<T>) -> Array5<T> {
        let mut y = xhat.clone();
        for mut sample in y.outer_iter_mut() {
            for (c, mut chan) in sample.outer_iter_mut().enumerate() {
                let g = self.gamma.value.as_slice().unwrap()[c];
                let b = self.beta.value.as_slice().unwrap()[c];
                chan.mapv_inplace(|v| g * v + b);
            }
        }
        y
    }

    pub fn forward(&self, x: &Array5<T>) -> Array5<T> {
        let (xhat, _) = self.normalize(x);
        self.scale_shift(&xhat)
    }

    pub fn forward_t(&self, x: &Array5<T>) -> (Array5<T>, GroupNormCache<T>) {
        let (xhat, rstd) = self.normalize(x);
        let y = self.scale_shift(&xhat);
        (y, GroupNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &GroupNormCache<T>, dy: &Array5<T>) -> Array5<T> {
        let xhat = &cache.xhat;
        let (n, c, d, h, w) = xhat.dim();
        let cg = c / self.groups;
        let m = (cg * d * h * w) as f64;
        // Parameter grads.
        {
            let gg = self.gamma.grad.as_slice_mut().unwrap();
            let gb = self.beta.grad.as_slice_mut().unwrap();
            for in_ in 0..n {
                for ci in 0..c {
                    let xv = xhat.index_axis(ndarray::Axis(0), in_);
                    let xv = xv.index_axis(ndarray::Axis(0), ci);
                    let dv = dy.index_axis(ndarray::Axis(0), in_);
                    let dv = dv.index_axis(ndarray::Axis(0), ci);
                    let mut sg = 0.0f64;
                    let mut sb = 0.0f64;
                    ndarray::Zip::from(&xv).and(&dv).for_each(|&xh, &g| {
                        sg += xh.as_f64() * g.as_f64();
                        sb += g.as_f64();
                    });
                    gg[ci] += T::from_f64(sg);
                    gb[ci] += T::from_f64(sb);
                }
            }
        }
        // Input grads.
        let mut dx = Array5::zeros(xhat.dim());
        let gamma = self.gamma.value.as_slice().unwrap();
        for in_ in 0..n {
            for g in 0..self.groups {
                let sl = ndarray::s![in_, g * cg..(g + 1) * cg, .., .., ..];
                let xv = xhat.slice(sl);
                let dv = dy.slice(sl);
                // dxhat = dy * gamma(c); accumulate group statistics.
                let mut s1 = 0.0f64;
                let mut s2 = 0.0f64;
                for ci in 0..cg {
                    let ga = gamma[g * cg + ci].as_f64();
                    let xc = xv.index_axis(ndarray::Axis(0), ci);
                    let dc = dv.index_axis(ndarray::Axis(0), ci);
                    ndarray::Zip::from(&xc).and(&dc).for_each(|&xh, &gy| {
                        let dxh = gy.as_f64() * ga;
                        s1 += dxh;
                        s2 += dxh * xh.as_f64();
                    });
                }
                let r = cache.rstd[[in_, g]];
                let mut ov = dx.slice_mut(sl);
                for ci in 0..cg {
                    let ga = gamma[g * cg + ci].as_f64();
                    let xc = xv.index_axis(ndarray::Axis(0), ci);
                    let dc = dv.index_axis(ndarray::Axis(0), ci);
                    let mut oc = ov.index_axis_mut(ndarray::Axis(0), ci);
                    ndarray::Zip::from(&mut oc)
                        .and(&xc)
                        .and(&dc)
                        .for_each(|o, &xh, &gy| {
                            let dxh = gy.as_f64() * ga;
                            *o = T::from_f64(r * (dxh - (s1 + xh.as_f64() * s2) / m));
                        });
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Parameterized<T> for GroupNorm<T> {
    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<'_, T>) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn normalizes_groups_to_zero_mean_unit_var() {
        let mut rng = rng_from_seed(3);
        let mut x = Array5::<f64>::zeros((2, 4, 3, 3, 3));
        for v in x.iter_mut() {
            *v = crate::rng::normal_f64(&mut rng) * 2.0 + 0.5;
        }
        let gn = GroupNorm::<f64>::new(4, 2);
        let y = gn.forward(&x);
        let cg = 2;
        for in_ in 0..2 {
            for g in 0..2 {
                let sl = ndarray::s![in_, g * cg..(g + 1) * cg, .., .., ..];
                let yv = y.slice(sl);
                let m = yv.iter().sum::<f64>() / yv.len() as f64;
                let var = yv.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / yv.len() as f64;
                assert!(m.abs() < 1e-10, "mean {m}");
                assert!((var - 1.0).abs() < 1e-4, "var {var}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(4);
        let mut gn = GroupNorm::<f64>::new(4, 2);
        gn.gamma.randomize(1.0, &mut rng);
        gn.beta.randomize(0.3, &mut rng);
        let mut x = Array5::<f64>::zeros((1, 4, 2, 3, 2));
        for v in x.iter_mut() {
            *v = crate::rng::normal_f64(&mut rng);
        }
        // Weighted loss so dL/dy is non-trivial.
        let wts: Vec<f64> = (0..x.len())
            .map(|i| ((i % 7) as f64 - 3.0) * 0.25)
            .collect();
        let loss = |gnn: &GroupNorm<f64>, xx: &Array5<f64>| -> f64 {
            let y = gnn.forward(xx);
            y.iter().zip(&wts).map(|(v, w)| v * w).sum::<f64>()
        };
        let (_, cache) = gn.forward_t(&x);
        let dy = Array5::from_shape_vec(x.dim(), wts.clone()).unwrap();
        let dx = gn.backward(&cache, &dy);
        let h = 1e-6;
        for idx in [0usize, 33, 47] {
            let orig = x.as_slice().unwrap()[idx];
            x.as_slice_mut().unwrap()[idx] = orig + h;
            let lp = loss(&gn, &x);
            x.as_slice_mut().unwrap()[idx] = orig - h;
            let lm = loss(&gn, &x);
            x.as_slice_mut().unwrap()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = dx.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-4,
                "x[{idx}]: {fd} vs {an}"
            );
        }
        for idx in 0..4usize {
            let orig = gn.gamma.value.as_slice().unwrap()[idx];
            gn.gamma.value.as_slice_mut().unwrap()[idx] = orig + h;
            let lp = loss(&gn, &x);
            gn.gamma.value.as_slice_mut().unwrap()[idx] = orig - h;
            let lm = loss(&gn, &x);
            gn.gamma.value.as_slice_mut().unwrap()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = gn.gamma.grad.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() / fd.abs().max(1e-6) < 1e-4,
                "gamma[{idx}]: {fd} vs {an}"
            );
        }
    }
}
