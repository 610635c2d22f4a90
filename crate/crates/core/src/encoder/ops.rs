//! Row-wise kernels shared by the forward and backward passes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{matmul, Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Additive attention score for masked keys.
pub const MASK_ADD: f64 = -1e9;

// tanh-approximation constants: sqrt(2/pi) and the cubic coefficient.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let th = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * dinner
}

/// Normalized activations and inverse standard deviations cached for backward.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm<T: Real>(x: &[T], dim: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> (Vec<T>, NormCache<T>) {
    let rows = x.len() / dim;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().map(|v| v.f64()).sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / dim as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = T::of(inv);
        for i in 0..dim {
            let h = T::of((row[i].f64() - mean) * inv);
            xhat[r * dim + i] = h;
            y[r * dim + i] = gamma.data[i] * h + beta.data[i];
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Returns `dx`; accumulates into `dgamma` and `dbeta`.
pub(crate) fn layer_norm_backward<T: Real>(
    dy: &[T],
    dim: usize,
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    dgamma: &mut Tensor<T>,
    dbeta: &mut Tensor<T>,
) -> Vec<T> {
    let rows = dy.len() / dim;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dg = vec![0.0f64; dim];
    let mut db = vec![0.0f64; dim];
    let mut dxhat = vec![0.0f64; dim];
    for r in 0..rows {
        let base = r * dim;
        let mut sum = 0.0;
        let mut sum_xh = 0.0;
        for i in 0..dim {
            let g = dy[base + i].f64();
            let xh = cache.xhat[base + i].f64();
            dg[i] += g * xh;
            db[i] += g;
            let d = g * gamma.data[i].f64();
            dxhat[i] = d;
            sum += d;
            sum_xh += d * xh;
        }
        let inv = cache.inv_std[r].f64();
        let n = dim as f64;
        for i in 0..dim {
            let xh = cache.xhat[base + i].f64();
            dx[base + i] = T::of(inv * (dxhat[i] - sum / n - xh * sum_xh / n));
        }
    }
    for i in 0..dim {
        dgamma.data[i] = dgamma.data[i] + T::of(dg[i]);
        dbeta.data[i] = dbeta.data[i] + T::of(db[i]);
    }
    dx
}

/// `x · W + b` for `x` of shape `[rows, in]`.
pub(crate) fn linear<T: Real>(x: &[T], w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let (din, dout) = (w.shape[0], w.shape[1]);
    let rows = x.len() / din;
    let mut y = vec![T::zero(); rows * dout];
    for r in 0..rows {
        y[r * dout..(r + 1) * dout].copy_from_slice(&b.data);
    }
    matmul(x, false, &w.data, false, rows, din, dout, &mut y, true);
    y
}

/// Accumulates weight and bias gradients of [`linear`] and returns `dx`.
pub(crate) fn linear_backward<T: Real>(
    x: &[T],
    dy: &[T],
    w: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) -> Vec<T> {
    let (din, dout) = (w.shape[0], w.shape[1]);
    let rows = x.len() / din;
    matmul(x, true, dy, false, din, rows, dout, &mut dw.data, true);
    add_column_sums(dy, dout, &mut db.data);
    let mut dx = vec![T::zero(); rows * din];
    matmul(dy, false, &w.data, true, rows, dout, din, &mut dx, false);
    dx
}

pub(crate) fn add_column_sums<T: Real>(m: &[T], cols: usize, out: &mut [T]) {
    let mut acc = vec![0.0f64; cols];
    for row in m.chunks_exact(cols) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v.f64();
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = *o + T::of(a);
    }
}

/// Inverted-dropout multipliers: 0 with probability `p`, else `1/(1-p)`.
pub(crate) fn dropout_mask<T: Real>(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

pub(crate) fn apply_mask<T: Real>(x: &mut [T], mask: Option<&Vec<T>>) {
    if let Some(mask) = mask {
        for (v, &m) in x.iter_mut().zip(mask) {
            *v = *v * m;
        }
    }
}
