//! 2D convolution (planar branches of the structural encoder).

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut3};
use rayon::prelude::*;

use super::conv3d::Init;
use super::param::{join, Param, ParamVisitor, Parameterized};
use super::Scalar;
use crate::rng::SeededRng;

#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub w: Param<T>,
    pub b: Param<T>,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

pub struct Conv2dCache<T: Scalar> {
    x: Array4<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut SeededRng,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = match init {
            Init::VarianceScaling => Param::variance_scaled(&[c_out, c_in, k, k], fan_in, rng),
            Init::Zero => Param::zeros(&[c_out, c_in, k, k]),
        };
        Conv2d {
            w,
            b: Param::zeros(&[c_out]),
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    fn out_spatial(&self, a: usize, b: usize) -> (usize, usize) {
        let o = |i: usize| (i + 2 * self.pad - self.k) / self.stride + 1;
        (o(a), o(b))
    }

    fn w2(&self) -> ArrayView2<'_, T> {
        self.w
            .value
            .view()
            .into_shape_with_order((self.c_out, self.c_in * self.k * self.k))
            .expect("conv2d weight layout")
    }

    fn im2col(&self, x: &ArrayView3<T>, col: &mut Array2<T>) {
        let (_, a, b) = x.dim();
        let (oa, ob) = self.out_spatial(a, b);
        let xs = x.as_slice().expect("contiguous 2d sample");
        let cols = col.as_slice_mut().unwrap();
        let ncol = oa * ob;
        let (k, s, p) = (self.k, self.stride, self.pad);
        let mut row = 0usize;
        for ci in 0..self.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * ncol..(row + 1) * ncol];
                    row += 1;
                    for y_out in 0..oa {
                        let y_in = (y_out * s + ky) as isize - p as isize;
                        let seg = &mut dst[y_out * ob..(y_out + 1) * ob];
                        if y_in < 0 || y_in as usize >= a {
                            seg.fill(T::zero());
                            continue;
                        }
                        let base = (ci * a + y_in as usize) * b;
                        for (x_out, sv) in seg.iter_mut().enumerate() {
                            let x_in = (x_out * s + kx) as isize - p as isize;
                            *sv = if x_in >= 0 && (x_in as usize) < b {
                                xs[base + x_in as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, dcol: &Array2<T>, dx: &mut ArrayViewMut3<T>) {
        let (_, a, b) = dx.dim();
        let (oa, ob) = self.out_spatial(a, b);
        let dxs = dx.as_slice_mut().unwrap();
        let dcs = dcol.as_slice().unwrap();
        let ncol = oa * ob;
        let (k, s, p) = (self.k, self.stride, self.pad);
        let mut row = 0usize;
        for ci in 0..self.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &dcs[row * ncol..(row + 1) * ncol];
                    row += 1;
                    for y_out in 0..oa {
                        let y_in = (y_out * s + ky) as isize - p as isize;
                        if y_in < 0 || y_in as usize >= a {
                            continue;
                        }
                        let base = (ci * a + y_in as usize) * b;
                        let seg = &src[y_out * ob..(y_out + 1) * ob];
                        for (x_out, &sv) in seg.iter().enumerate() {
                            let x_in = (x_out * s + kx) as isize - p as isize;
                            if x_in >= 0 && (x_in as usize) < b {
                                dxs[base + x_in as usize] += sv;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (n, c_in, a, b) = x.dim();
        assert_eq!(c_in, self.c_in, "conv2d input channels");
        let (oa, ob) = self.out_spatial(a, b);
        let mut out = Array4::zeros((n, self.c_out, oa, ob));
        let w2 = self.w2();
        let bias: Vec<T> = self.b.value.iter().copied().collect();
        let rows = self.c_in * self.k * self.k;
        let xs: Vec<ArrayView3<T>> = x.outer_iter().collect();
        let mut outs: Vec<ArrayViewMut3<T>> = out.outer_iter_mut().collect();
        outs.par_iter_mut().zip(xs.par_iter()).for_each(|(o, xv)| {
            let mut col = Array2::<T>::zeros((rows, oa * ob));
            self.im2col(xv, &mut col);
            let mut y2 = Array2::<T>::zeros((self.c_out, oa * ob));
            general_mat_mul(T::one(), &w2, &col.view(), T::zero(), &mut y2);
            for co in 0..self.c_out {
                let bc = bias[co];
                let row = y2.row(co);
                let mut dst = o.index_axis_mut(ndarray::Axis(0), co);
                for (dv, &sv) in dst.iter_mut().zip(row.iter()) {
                    *dv = sv + bc;
                }
            }
        });
        out
    }

    pub fn forward_t(&self, x: &Array4<T>) -> (Array4<T>, Conv2dCache<T>) {
        let y = self.forward(x);
        (y, Conv2dCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &Conv2dCache<T>, dy: &Array4<T>) -> Array4<T> {
        let x = &cache.x;
        let (n, _, a, b) = x.dim();
        let (oa, ob) = self.out_spatial(a, b);
        assert_eq!(dy.dim(), (n, self.c_out, oa, ob), "conv2d dy shape");
        let rows = self.c_in * self.k * self.k;
        let w2 = self.w2();
        let mut dx = Array4::zeros(x.dim());
        let xs: Vec<ArrayView3<T>> = x.outer_iter().collect();
        let dys: Vec<ArrayView3<T>> = dy.outer_iter().collect();
        let mut dxs: Vec<ArrayViewMut3<T>> = dx.outer_iter_mut().collect();
        let partials: Vec<(Array2<T>, Vec<T>)> = dxs
            .par_iter_mut()
            .zip(xs.par_iter().zip(dys.par_iter()))
            .map(|(dxv, (xv, dyv))| {
                let mut col = Array2::<T>::zeros((rows, oa * ob));
                self.im2col(xv, &mut col);
                let mut dy2 = Array2::<T>::zeros((self.c_out, oa * ob));
                let mut db = vec![T::zero(); self.c_out];
                for co in 0..self.c_out {
                    let src = dyv.index_axis(ndarray::Axis(0), co);
                    let mut acc = T::zero();
                    for (dv, &sv) in dy2.row_mut(co).iter_mut().zip(src.iter()) {
                        *dv = sv;
                        acc += sv;
                    }
                    db[co] = acc;
                }
                let mut dw2 = Array2::<T>::zeros((self.c_out, rows));
                general_mat_mul(T::one(), &dy2.view(), &col.t(), T::zero(), &mut dw2);
                let mut dcol = Array2::<T>::zeros((rows, oa * ob));
                general_mat_mul(T::one(), &w2.t(), &dy2.view(), T::zero(), &mut dcol);
                self.col2im(&dcol, dxv);
                (dw2, db)
            })
            .collect();
        let mut gw2 = self
            .w
            .grad
            .view_mut()
            .into_shape_with_order((self.c_out, rows))
            .unwrap();
        for (dw2, db) in &partials {
            gw2 += dw2;
            for (gb, &d) in self.b.grad.iter_mut().zip(db.iter()) {
                *gb += d;
            }
        }
        dx
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<'_, T>) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}
