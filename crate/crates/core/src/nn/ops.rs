//! Parameter-free tensor operations with explicit backward passes.

use ndarray::{Array2, Array4, Array5, Axis};

use super::Scalar;

/// x * sigmoid(x), element-wise.
pub fn silu<T: Scalar>(x: &Array5<T>) -> Array5<T> {
    x.mapv(|v| {
        let s = T::one() / (T::one() + (-v).exp());
        v * s
    })
}

/// Gradient of silu given its input and the upstream gradient.
pub fn silu_backward<T: Scalar>(x: &Array5<T>, dy: &Array5<T>) -> Array5<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|g, &v| {
        let s = T::one() / (T::one() + (-v).exp());
        *g *= s + v * s * (T::one() - s);
    });
    dx
}

pub fn silu2<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| {
        let s = T::one() / (T::one() + (-v).exp());
        v * s
    })
}

pub fn silu2_backward<T: Scalar>(x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|g, &v| {
        let s = T::one() / (T::one() + (-v).exp());
        *g *= s + v * s * (T::one() - s);
    });
    dx
}

pub fn silu4<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| {
        let s = T::one() / (T::one() + (-v).exp());
        v * s
    })
}

pub fn silu4_backward<T: Scalar>(x: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|g, &v| {
        let s = T::one() / (T::one() + (-v).exp());
        *g *= s + v * s * (T::one() - s);
    });
    dx
}

/// Nearest-neighbour 2x upsampling along all three spatial axes.
pub fn upsample_nearest2<T: Scalar>(x: &Array5<T>) -> Array5<T> {
    let (n, c, d, h, w) = x.dim();
    let mut out = Array5::zeros((n, c, 2 * d, 2 * h, 2 * w));
    for in_ in 0..n {
        for ic in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let v = x[[in_, ic, z, y, xx]];
                        for (a, b, cc) in [
                            (0, 0, 0),
                            (0, 0, 1),
                            (0, 1, 0),
                            (0, 1, 1),
                            (1, 0, 0),
                            (1, 0, 1),
                            (1, 1, 0),
                            (1, 1, 1),
                        ] {
                            out[[in_, ic, 2 * z + a, 2 * y + b, 2 * xx + cc]] = v;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward<T: Scalar>(
    dy: &Array5<T>,
    in_dims: (usize, usize, usize, usize, usize),
) -> Array5<T> {
    let (n, c, d, h, w) = in_dims;
    let mut dx = Array5::zeros(in_dims);
    for in_ in 0..n {
        for ic in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = T::zero();
                        for (a, b, cc) in [
                            (0, 0, 0),
                            (0, 0, 1),
                            (0, 1, 0),
                            (0, 1, 1),
                            (1, 0, 0),
                            (1, 0, 1),
                            (1, 1, 0),
                            (1, 1, 1),
                        ] {
                            acc += dy[[in_, ic, 2 * z + a, 2 * y + b, 2 * xx + cc]];
                        }
                        dx[[in_, ic, z, y, xx]] = acc;
                    }
                }
            }
        }
    }
    dx
}

/// Concatenate along the channel axis into a standard-layout array.
pub fn concat_channels<T: Scalar>(a: &Array5<T>, b: &Array5<T>) -> Array5<T> {
    let (n, ca, d, h, w) = a.dim();
    let cb = b.dim().1;
    assert_eq!(
        (n, d, h, w),
        (b.dim().0, b.dim().2, b.dim().3, b.dim().4),
        "concat spatial dims"
    );
    let mut out = Array5::zeros((n, ca + cb, d, h, w));
    out.slice_mut(ndarray::s![.., ..ca, .., .., ..]).assign(a);
    out.slice_mut(ndarray::s![.., ca.., .., .., ..]).assign(b);
    out
}

/// Split an upstream gradient back into the two concatenated parts.
pub fn split_channels<T: Scalar>(dy: &Array5<T>, c_first: usize) -> (Array5<T>, Array5<T>) {
    let da = dy.slice(ndarray::s![.., ..c_first, .., .., ..]).to_owned();
    let db = dy.slice(ndarray::s![.., c_first.., .., .., ..]).to_owned();
    (da, db)
}

/// Global average pool over the three spatial axes: (N,C,D,H,W) -> (N,C).
pub fn gap3d<T: Scalar>(x: &Array5<T>) -> Array2<T> {
    let (n, c, d, h, w) = x.dim();
    let m = T::from_f64((d * h * w) as f64);
    let mut out = Array2::zeros((n, c));
    for in_ in 0..n {
        for ic in 0..c {
            let mut acc = T::zero();
            for v in x.index_axis(Axis(0), in_).index_axis(Axis(0), ic).iter() {
                acc += *v;
            }
            out[[in_, ic]] = acc / m;
        }
    }
    out
}

pub fn gap3d_backward<T: Scalar>(
    dy: &Array2<T>,
    in_dims: (usize, usize, usize, usize, usize),
) -> Array5<T> {
    let (_, _, d, h, w) = in_dims;
    let m = T::from_f64((d * h * w) as f64);
    let mut dx = Array5::zeros(in_dims);
    for (in_, mut sample) in dx.outer_iter_mut().enumerate() {
        for (ic, mut chan) in sample.outer_iter_mut().enumerate() {
            let g = dy[[in_, ic]] / m;
            chan.fill(g);
        }
    }
    dx
}

/// Global average pool for 2D maps: (N,C,A,B) -> (N,C).
pub fn gap2d<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (n, c, a, b) = x.dim();
    let m = T::from_f64((a * b) as f64);
    let mut out = Array2::zeros((n, c));
    for in_ in 0..n {
        for ic in 0..c {
            let mut acc = T::zero();
            for v in x.index_axis(Axis(0), in_).index_axis(Axis(0), ic).iter() {
                acc += *v;
            }
            out[[in_, ic]] = acc / m;
        }
    }
    out
}

pub fn gap2d_backward<T: Scalar>(
    dy: &Array2<T>,
    in_dims: (usize, usize, usize, usize),
) -> Array4<T> {
    let (_, _, a, b) = in_dims;
    let m = T::from_f64((a * b) as f64);
    let mut dx = Array4::zeros(in_dims);
    for (in_, mut sample) in dx.outer_iter_mut().enumerate() {
        for (ic, mut chan) in sample.outer_iter_mut().enumerate() {
            chan.fill(dy[[in_, ic]] / m);
        }
    }
    dx
}

/// Arithmetic mean over one spatial axis of (N,C,D,H,W); `axis` is 3 (height)
/// or 4 (width). Output drops the averaged axis.
pub fn mean_over_axis<T: Scalar>(x: &Array5<T>, axis: usize) -> Array4<T> {
    assert!(axis == 3 || axis == 4, "projection axis must be 3 or 4");
    let m = T::from_f64(x.dim().3 as f64);
    let m4 = T::from_f64(x.dim().4 as f64);
    if axis == 3 {
        x.sum_axis(Axis(3)).mapv(|v| v / m)
    } else {
        x.sum_axis(Axis(4)).mapv(|v| v / m4)
    }
}

pub fn mean_over_axis_backward<T: Scalar>(
    dy: &Array4<T>,
    in_dims: (usize, usize, usize, usize, usize),
    axis: usize,
) -> Array5<T> {
    let (n, c, d, h, w) = in_dims;
    let mut dx = Array5::zeros(in_dims);
    if axis == 3 {
        let g = T::from_f64(h as f64);
        for in_ in 0..n {
            for ic in 0..c {
                for z in 0..d {
                    for xx in 0..w {
                        let v = dy[[in_, ic, z, xx]] / g;
                        for y in 0..h {
                            dx[[in_, ic, z, y, xx]] = v;
                        }
                    }
                }
            }
        }
    } else {
        let g = T::from_f64(w as f64);
        for in_ in 0..n {
            for ic in 0..c {
                for z in 0..d {
                    for y in 0..h {
                        let v = dy[[in_, ic, z, y]] / g;
                        for xx in 0..w {
                            dx[[in_, ic, z, y, xx]] = v;
                        }
                    }
                }
            }
        }
    }
    dx
}
