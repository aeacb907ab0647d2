//! 3D convolution via per-slice im2col + GEMM.
//!
//! Forward and backward parallelize over the batch axis; per-sample partial
//! weight gradients are reduced in sample order so accumulation is
//! deterministic.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array5, ArrayView2, ArrayView4, ArrayViewMut4};
use rayon::prelude::*;

use super::param::{join, Param, ParamVisitor, Parameterized};
use super::Scalar;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    VarianceScaling,
    Zero,
}

#[derive(Debug, Clone)]
pub struct Conv3d<T: Scalar> {
    pub w: Param<T>,
    pub b: Param<T>,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

pub struct Conv3dCache<T: Scalar> {
    x: Array5<T>,
}

impl<T: Scalar> Conv3d<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut SeededRng,
    ) -> Self {
        let fan_in = c_in * k * k * k;
        let w = match init {
            Init::VarianceScaling => Param::variance_scaled(&[c_out, c_in, k, k, k], fan_in, rng),
            Init::Zero => Param::zeros(&[c_out, c_in, k, k, k]),
        };
        Conv3d {
            w,
            b: Param::zeros(&[c_out]),
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    fn out_spatial(&self, d: usize, h: usize, w: usize) -> (usize, usize, usize) {
        let o = |i: usize| (i + 2 * self.pad - self.k) / self.stride + 1;
        (o(d), o(h), o(w))
    }

    fn w2(&self) -> ArrayView2<'_, T> {
        self.w
            .value
            .view()
            .into_shape_with_order((self.c_out, self.c_in * self.k * self.k * self.k))
            .expect("conv weight is standard layout")
    }

    pub fn forward(&self, x: &Array5<T>) -> Array5<T> {
        let (n, c_in, d, h, w) = x.dim();
        assert_eq!(c_in, self.c_in, "conv3d input channels");
        let (od, oh, ow) = self.out_spatial(d, h, w);
        let mut out = Array5::zeros((n, self.c_out, od, oh, ow));
        let w2 = self.w2();
        let bias: Vec<T> = self.b.value.iter().copied().collect();
        let xs: Vec<ArrayView4<T>> = x.outer_iter().collect();
        let mut outs: Vec<ArrayViewMut4<T>> = out.outer_iter_mut().collect();
        outs.par_iter_mut().zip(xs.par_iter()).for_each(|(o, xv)| {
            self.forward_one(xv, o, &w2, &bias);
        });
        out
    }

    pub fn forward_t(&self, x: &Array5<T>) -> (Array5<T>, Conv3dCache<T>) {
        let y = self.forward(x);
        (y, Conv3dCache { x: x.clone() })
    }

    fn forward_one(
        &self,
        x: &ArrayView4<T>,
        out: &mut ArrayViewMut4<T>,
        w2: &ArrayView2<T>,
        bias: &[T],
    ) {
        let (_, d, h, w) = x.dim();
        let (od, oh, ow) = self.out_spatial(d, h, w);
        let rows = self.c_in * self.k * self.k * self.k;
        let mut col = Array2::<T>::zeros((rows, oh * ow));
        let mut y2 = Array2::<T>::zeros((self.c_out, oh * ow));
        for z_out in 0..od {
            self.im2col_slice(x, z_out, &mut col);
            general_mat_mul(T::one(), w2, &col.view(), T::zero(), &mut y2);
            for co in 0..self.c_out {
                let bc = bias[co];
                let row = y2.row(co);
                let mut dst = out.slice_mut(ndarray::s![co, z_out, .., ..]);
                let dsts = dst.as_slice_mut().expect("contiguous output slice");
                for (dv, &sv) in dsts.iter_mut().zip(row.iter()) {
                    *dv = sv + bc;
                }
            }
        }
    }

    /// Gather the receptive fields of one output z-slice into `col`
    /// (rows = c_in*k^3, cols = oh*ow), zero-padding out-of-range taps.
    fn im2col_slice(&self, x: &ArrayView4<T>, z_out: usize, col: &mut Array2<T>) {
        let (_, d, h, w) = x.dim();
        let (_, oh, ow) = self.out_spatial(d, h, w);
        let xs = x.as_slice().expect("contiguous input sample");
        let (k, s, p) = (self.k, self.stride, self.pad);
        let cols = col.as_slice_mut().expect("contiguous col");
        let ncol = oh * ow;
        let mut row = 0usize;
        for ci in 0..self.c_in {
            for kz in 0..k {
                let z_in = (z_out * s + kz) as isize - p as isize;
                let z_ok = z_in >= 0 && (z_in as usize) < d;
                for ky in 0..k {
                    for kx in 0..k {
                        let dst = &mut cols[row * ncol..(row + 1) * ncol];
                        row += 1;
                        if !z_ok {
                            dst.fill(T::zero());
                            continue;
                        }
                        let zi = z_in as usize;
                        for y_out in 0..oh {
                            let y_in = (y_out * s + ky) as isize - p as isize;
                            let seg = &mut dst[y_out * ow..(y_out + 1) * ow];
                            if y_in < 0 || y_in as usize >= h {
                                seg.fill(T::zero());
                                continue;
                            }
                            let src_base = ((ci * d + zi) * h + y_in as usize) * w;
                            if s == 1 {
                                let off = kx as isize - p as isize;
                                for (x_out, sv) in seg.iter_mut().enumerate() {
                                    let x_in = x_out as isize + off;
                                    *sv = if x_in >= 0 && (x_in as usize) < w {
                                        xs[src_base + x_in as usize]
                                    } else {
                                        T::zero()
                                    };
                                }
                            } else {
                                for (x_out, sv) in seg.iter_mut().enumerate() {
                                    let x_in = (x_out * s + kx) as isize - p as isize;
                                    *sv = if x_in >= 0 && (x_in as usize) < w {
                                        xs[src_base + x_in as usize]
                                    } else {
                                        T::zero()
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter a column-form gradient back onto the input gradient.
    fn col2im_slice(&self, dcol: &Array2<T>, z_out: usize, dx: &mut ArrayViewMut4<T>) {
        let (_, d, h, w) = dx.dim();
        let (_, oh, ow) = self.out_spatial(d, h, w);
        let (k, s, p) = (self.k, self.stride, self.pad);
        let dxs = dx.as_slice_mut().expect("contiguous dx sample");
        let dcs = dcol.as_slice().expect("contiguous dcol");
        let ncol = oh * ow;
        let mut row = 0usize;
        for ci in 0..self.c_in {
            for kz in 0..k {
                let z_in = (z_out * s + kz) as isize - p as isize;
                let z_ok = z_in >= 0 && (z_in as usize) < d;
                for ky in 0..k {
                    for kx in 0..k {
                        let src = &dcs[row * ncol..(row + 1) * ncol];
                        row += 1;
                        if !z_ok {
                            continue;
                        }
                        let zi = z_in as usize;
                        for y_out in 0..oh {
                            let y_in = (y_out * s + ky) as isize - p as isize;
                            if y_in < 0 || y_in as usize >= h {
                                continue;
                            }
                            let dst_base = ((ci * d + zi) * h + y_in as usize) * w;
                            let seg = &src[y_out * ow..(y_out + 1) * ow];
                            for (x_out, &sv) in seg.iter().enumerate() {
                                let x_in = (x_out * s + kx) as isize - p as isize;
                                if x_in >= 0 && (x_in as usize) < w {
                                    dxs[dst_base + x_in as usize] += sv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates dW/db into the parameter grads; returns dL/dx.
    pub fn backward(&mut self, cache: &Conv3dCache<T>, dy: &Array5<T>) -> Array5<T> {
        let x = &cache.x;
        let (n, _, d, h, w) = x.dim();
        let (od, oh, ow) = self.out_spatial(d, h, w);
        assert_eq!(dy.dim(), (n, self.c_out, od, oh, ow), "conv3d dy shape");
        let rows = self.c_in * self.k * self.k * self.k;
        let w2 = self.w2();

        let mut dx = Array5::zeros(x.dim());
        let xs: Vec<ArrayView4<T>> = x.outer_iter().collect();
        let dys: Vec<ArrayView4<T>> = dy.outer_iter().collect();
        let mut dxs: Vec<ArrayViewMut4<T>> = dx.outer_iter_mut().collect();

        // Per-sample partial (dW, db), reduced in order afterwards.
        let partials: Vec<(Array2<T>, Vec<T>)> = dxs
            .par_iter_mut()
            .zip(xs.par_iter().zip(dys.par_iter()))
            .map(|(dxv, (xv, dyv))| {
                let mut dw2 = Array2::<T>::zeros((self.c_out, rows));
                let mut db = vec![T::zero(); self.c_out];
                let mut col = Array2::<T>::zeros((rows, oh * ow));
                let mut dy2 = Array2::<T>::zeros((self.c_out, oh * ow));
                let mut dcol = Array2::<T>::zeros((rows, oh * ow));
                for z_out in 0..od {
                    for co in 0..self.c_out {
                        let src = dyv.slice(ndarray::s![co, z_out, .., ..]);
                        let srcs = src.as_slice().expect("contiguous dy slice");
                        let mut dst = dy2.row_mut(co);
                        let dsts = dst.as_slice_mut().unwrap();
                        dsts.copy_from_slice(srcs);
                        let mut acc = T::zero();
                        for &v in srcs {
                            acc += v;
                        }
                        db[co] += acc;
                    }
                    self.im2col_slice(xv, z_out, &mut col);
                    general_mat_mul(T::one(), &dy2.view(), &col.t(), T::one(), &mut dw2);
                    general_mat_mul(T::one(), &w2.t(), &dy2.view(), T::zero(), &mut dcol);
                    self.col2im_slice(&dcol, z_out, dxv);
                }
                (dw2, db)
            })
            .collect();

        let mut gw2 = self
            .w
            .grad
            .view_mut()
            .into_shape_with_order((self.c_out, rows))
            .expect("grad layout");
        for (dw2, db) in &partials {
            gw2 += dw2;
            for (gb, &d) in self.b.grad.iter_mut().zip(db.iter()) {
                *gb += d;
            }
        }
        dx
    }
}

impl<T: Scalar> Parameterized<T> for Conv3d<T> {
    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<'_, T>) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}
