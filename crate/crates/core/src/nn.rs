//! Small building blocks with explicit backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis, NdFloat, Zip};
use rand::Rng;

use crate::attention::cast;

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm intermediates.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

/// `y = g ⊙ (x − μ)/σ + b` per row; `g` and `b` are `1 x d`.
pub fn layer_norm<T: NdFloat>(x: ArrayView2<'_, T>, g: &Array2<T>, b: &Array2<T>) -> (Array2<T>, NormCache<T>) {
    let (n, d) = x.dim();
    let inv_d = cast::<T>(1.0 / d as f64);
    let eps = cast::<T>(LN_EPS);
    let mut xhat = Array2::<T>::zeros((n, d));
    let mut inv_std = Array1::<T>::zeros(n);
    Zip::from(xhat.rows_mut())
        .and(x.rows())
        .and(&mut inv_std)
        .for_each(|mut out, row, is| {
            let mean = row.sum() * inv_d;
            let var = row.fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
            *is = T::one() / (var + eps).sqrt();
            let s = *is;
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * s);
        });
    let y = &xhat * g + b;
    (y, NormCache { xhat, inv_std })
}

/// Returns `(dx, dg, db)`.
pub fn layer_norm_backward<T: NdFloat>(
    cache: &NormCache<T>,
    g: &Array2<T>,
    dy: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let d = dy.ncols();
    let inv_d = cast::<T>(1.0 / d as f64);
    let dg = (&dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = &dy * g;
    let mut dx = Array2::<T>::zeros(dy.raw_dim());
    Zip::from(dx.rows_mut())
        .and(dxhat.rows())
        .and(cache.xhat.rows())
        .and(&cache.inv_std)
        .for_each(|mut out, dh, xh, &is| {
            let m1 = dh.sum() * inv_d;
            let m2 = dh.iter().zip(xh.iter()).fold(T::zero(), |a, (&p, &q)| a + p * q) * inv_d;
            Zip::from(&mut out)
                .and(&dh)
                .and(&xh)
                .for_each(|o, &a, &b| *o = is * (a - m1 - b * m2));
        });
    (dx, dg, db)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: NdFloat>(x: T) -> T {
    let half = cast::<T>(0.5);
    let t = (cast::<T>(GELU_C) * (x + cast::<T>(GELU_K) * x * x * x)).tanh();
    half * x * (T::one() + t)
}

pub fn gelu_grad<T: NdFloat>(x: T) -> T {
    let half = cast::<T>(0.5);
    let c = cast::<T>(GELU_C);
    let k = cast::<T>(GELU_K);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + cast::<T>(3.0) * k * x * x)
}

/// Inverted dropout mask: entries are 0 or `1/(1−rate)`.
pub fn dropout_mask<T: NdFloat>(shape: (usize, usize), rate: f64, rng: &mut impl Rng) -> Array2<T> {
    let keep = cast::<T>(1.0 / (1.0 - rate));
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { T::zero() } else { keep })
}

/// `x W + b` with `b` broadcast over rows.
pub fn affine<T: NdFloat>(x: ArrayView2<'_, T>, w: &Array2<T>, b: &Array2<T>) -> Array2<T> {
    x.dot(w) + b
}
