//! Fully connected layer on (N, D) matrices.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2};

use super::conv3d::Init;
use super::param::{join, Param, ParamVisitor, Parameterized};
use super::Scalar;
use crate::rng::SeededRng;

#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub w: Param<T>, // [d_out, d_in]
    pub b: Param<T>, // [d_out]
    d_in: usize,
    d_out: usize,
}

pub struct LinearCache<T: Scalar> {
    x: Array2<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(d_in: usize, d_out: usize, init: Init, rng: &mut SeededRng) -> Self {
        let w = match init {
            Init::VarianceScaling => Param::variance_scaled(&[d_out, d_in], d_in, rng),
            Init::Zero => Param::zeros(&[d_out, d_in]),
        };
        Linear {
            w,
            b: Param::zeros(&[d_out]),
            d_in,
            d_out,
        }
    }

    fn w2(&self) -> ArrayView2<'_, T> {
        self.w
            .value
            .view()
            .into_shape_with_order((self.d_out, self.d_in))
            .unwrap()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let n = x.dim().0;
        assert_eq!(x.dim().1, self.d_in, "linear input dim");
        let mut y = Array2::zeros((n, self.d_out));
        general_mat_mul(T::one(), x, &self.w2().t(), T::zero(), &mut y);
        let b = self.b.value.as_slice().unwrap();
        for mut row in y.outer_iter_mut() {
            for (v, &bb) in row.iter_mut().zip(b.iter()) {
                *v += bb;
            }
        }
        y
    }

    pub fn forward_t(&self, x: &Array2<T>) -> (Array2<T>, LinearCache<T>) {
        let y = self.forward(x);
        (y, LinearCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache<T>, dy: &Array2<T>) -> Array2<T> {
        let x = &cache.x;
        assert_eq!(dy.dim(), (x.dim().0, self.d_out), "linear dy shape");
        {
            let mut gw = self
                .w
                .grad
                .view_mut()
                .into_shape_with_order((self.d_out, self.d_in))
                .unwrap();
            general_mat_mul(T::one(), &dy.t(), x, T::one(), &mut gw);
        }
        let gb = self.b.grad.as_slice_mut().unwrap();
        for row in dy.outer_iter() {
            for (g, &v) in gb.iter_mut().zip(row.iter()) {
                *g += v;
            }
        }
        let mut dx = Array2::zeros(x.dim());
        general_mat_mul(T::one(), dy, &self.w2(), T::zero(), &mut dx);
        dx
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<'_, T>) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}
