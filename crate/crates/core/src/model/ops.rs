//! Dense primitives with explicit backward passes. Every matrix is
//! row-major; gradient outputs accumulate into the provided buffers.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

pub const LN_EPS: f64 = 1e-5;

/// `x (n x din) * w (din x dout) + b`.
pub fn linear<T: Real>(x: &[T], n: usize, din: usize, w: &[T], b: Option<&[T]>, dout: usize) -> Vec<T> {
    let mut y = match b {
        Some(b) => {
            let mut y = Vec::with_capacity(n * dout);
            for _ in 0..n {
                y.extend_from_slice(b);
            }
            y
        }
        None => vec![T::zero(); n * dout],
    };
    T::gemm(n, din, dout, T::one(), x, false, w, false, T::one(), &mut y);
    y
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    n: usize,
    din: usize,
    w: &[T],
    dout: usize,
    dy: &[T],
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    if let Some(dw) = dw {
        T::gemm(din, n, dout, T::one(), x, true, dy, false, T::one(), dw);
    }
    if let Some(db) = db {
        for row in dy.chunks_exact(dout) {
            for (g, v) in db.iter_mut().zip(row) {
                *g += *v;
            }
        }
    }
    if let Some(dx) = dx {
        T::gemm(n, dout, din, T::one(), dy, false, w, true, T::one(), dx);
    }
}

/// Row-wise layer norm. Returns `(y, xhat, rstd)`.
pub fn layer_norm<T: Real>(x: &[T], d: usize, gamma: &[T], beta: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n];
    let inv_d = T::one() / T::of(d as f64);
    let eps = T::of(LN_EPS);
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = h * gamma[c] + beta[c];
        }
    }
    (y, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    d: usize,
    gamma: &[T],
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
    dx: &mut [T],
) {
    let n = rstd.len();
    if let Some(dg) = dgamma {
        for r in 0..n {
            for c in 0..d {
                dg[c] += dy[r * d + c] * xhat[r * d + c];
            }
        }
    }
    if let Some(db) = dbeta {
        for r in 0..n {
            for c in 0..d {
                db[c] += dy[r * d + c];
            }
        }
    }
    let inv_d = T::one() / T::of(d as f64);
    for r in 0..n {
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for c in 0..d {
            let g = dy[r * d + c] * gamma[c];
            m1 += g;
            m2 += g * xhat[r * d + c];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        for c in 0..d {
            let g = dy[r * d + c] * gamma[c];
            dx[r * d + c] += rstd[r] * (g - m1 - xhat[r * d + c] * m2);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: &[T]) -> Vec<T> {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    x.iter()
        .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
        .collect()
}

/// `dx += dy * gelu'(x)`.
pub fn gelu_backward<T: Real>(x: &[T], dy: &[T], dx: &mut [T]) {
    let (c, a, half, three) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5), T::of(3.0));
    for ((g, &v), &d) in dx.iter_mut().zip(x).zip(dy) {
        let th = (c * (v + a * v * v * v)).tanh();
        let dth = (T::one() - th * th) * c * (T::one() + three * a * v * v);
        *g += d * (half * (T::one() + th) + half * v * dth);
    }
}

fn softmax_rows<T: Real>(s: &mut [T], cols: usize) {
    for row in s.chunks_exact_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

fn head_slice<T: Real>(x: &[T], n: usize, d: usize, h: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * dh);
    for r in 0..n {
        out.extend_from_slice(&x[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn head_scatter_add<T: Real>(src: &[T], dst: &mut [T], n: usize, d: usize, h: usize, dh: usize) {
    for r in 0..n {
        for c in 0..dh {
            dst[r * d + h * dh + c] += src[r * dh + c];
        }
    }
}

/// Cached softmax probabilities of a multi-head attention call.
#[derive(Debug, Clone)]
pub struct AttnCache<T> {
    pub probs: Vec<Vec<T>>,
}

/// Unmasked scaled dot-product attention over `heads` heads.
/// `q` is `nq x d`, `k` and `v` are `nk x d`; returns `nq x d`.
pub fn attention<T: Real>(q: &[T], k: &[T], v: &[T], nq: usize, nk: usize, d: usize, heads: usize) -> (Vec<T>, AttnCache<T>) {
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); nq * d];
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_slice(q, nq, d, h, dh);
        let kh = head_slice(k, nk, d, h, dh);
        let vh = head_slice(v, nk, d, h, dh);
        let mut s = vec![T::zero(); nq * nk];
        T::gemm(nq, dh, nk, scale, &qh, false, &kh, true, T::zero(), &mut s);
        softmax_rows(&mut s, nk);
        let mut ctx = vec![T::zero(); nq * dh];
        T::gemm(nq, nk, dh, T::one(), &s, false, &vh, false, T::zero(), &mut ctx);
        head_scatter_add(&ctx, &mut out, nq, d, h, dh);
        probs.push(s);
    }
    (out, AttnCache { probs })
}

/// Accumulates gradients of [`attention`] into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    cache: &AttnCache<T>,
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    for h in 0..heads {
        let p = &cache.probs[h];
        let qh = head_slice(q, nq, d, h, dh);
        let kh = head_slice(k, nk, d, h, dh);
        let vh = head_slice(v, nk, d, h, dh);
        let dctx = head_slice(dout, nq, d, h, dh);
        // dV = P^T dctx
        let mut dvh = vec![T::zero(); nk * dh];
        T::gemm(nk, nq, dh, T::one(), p, true, &dctx, false, T::zero(), &mut dvh);
        // dP = dctx V^T
        let mut ds = vec![T::zero(); nq * nk];
        T::gemm(nq, dh, nk, T::one(), &dctx, false, &vh, true, T::zero(), &mut ds);
        for r in 0..nq {
            let prow = &p[r * nk..(r + 1) * nk];
            let drow = &mut ds[r * nk..(r + 1) * nk];
            let dot: T = prow.iter().zip(drow.iter()).map(|(a, b)| *a * *b).sum();
            for (g, pv) in drow.iter_mut().zip(prow) {
                *g = *pv * (*g - dot);
            }
        }
        let mut dqh = vec![T::zero(); nq * dh];
        T::gemm(nq, nk, dh, scale, &ds, false, &kh, false, T::zero(), &mut dqh);
        let mut dkh = vec![T::zero(); nk * dh];
        T::gemm(nk, nq, dh, scale, &ds, true, &qh, false, T::zero(), &mut dkh);
        head_scatter_add(&dqh, dq, nq, d, h, dh);
        head_scatter_add(&dkh, dk, nk, d, h, dh);
        head_scatter_add(&dvh, dv, nk, d, h, dh);
    }
}

/// Sinusoidal embedding of the flow time `t` in `[0, 1]`.
pub fn time_embedding<T: Real>(t: T, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let ts = t.as_f64() * 1000.0;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half.max(1) as f64);
        out.push(T::of(libm::sin(ts * freq)));
    }
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half.max(1) as f64);
        out.push(T::of(libm::cos(ts * freq)));
    }
    out.resize(dim, T::zero());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    /// Central-difference check of a scalar function's gradient.
    fn check(f: &dyn Fn(&[f64]) -> f64, x: &[f64], g: &[f64]) {
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += eps;
            xm[i] -= eps;
            let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-7 * fd.abs().max(1.0), "i={i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let (n, d) = (3, 5);
        let x = lcg(n * d, 1);
        let gamma = lcg(d, 2);
        let beta = lcg(d, 3);
        let w = lcg(n * d, 4);
        let f = |x: &[f64]| -> f64 {
            let (y, _, _) = layer_norm(x, d, &gamma, &beta);
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, xhat, rstd) = layer_norm(&x, d, &gamma, &beta);
        let mut dx = vec![0.0; n * d];
        layer_norm_backward(&w, &xhat, &rstd, d, &gamma, None, None, &mut dx);
        check(&f, &x, &dx);
    }

    #[test]
    fn gelu_gradient() {
        let x = lcg(20, 5).iter().map(|v| v * 4.0).collect::<Vec<_>>();
        let w = lcg(20, 6);
        let f = |x: &[f64]| -> f64 { gelu(x).iter().zip(&w).map(|(a, b)| a * b).sum() };
        let mut dx = vec![0.0; 20];
        gelu_backward(&x, &w, &mut dx);
        check(&f, &x, &dx);
    }

    #[test]
    fn attention_gradient() {
        let (nq, nk, d, heads) = (3, 4, 6, 2);
        let q = lcg(nq * d, 7);
        let k = lcg(nk * d, 8);
        let v = lcg(nk * d, 9);
        let w = lcg(nq * d, 10);
        let loss = |q: &[f64], k: &[f64], v: &[f64]| -> f64 {
            let (o, _) = attention(q, k, v, nq, nk, d, heads);
            o.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = attention(&q, &k, &v, nq, nk, d, heads);
        let (mut dq, mut dk, mut dv) = (vec![0.0; nq * d], vec![0.0; nk * d], vec![0.0; nk * d]);
        attention_backward(&w, &q, &k, &v, &cache, nq, nk, d, heads, &mut dq, &mut dk, &mut dv);
        check(&|x| loss(x, &k, &v), &q, &dq);
        check(&|x| loss(&q, x, &v), &k, &dk);
        check(&|x| loss(&q, &k, x), &v, &dv);
    }

    #[test]
    fn linear_gradient() {
        let (n, din, dout) = (2, 3, 4);
        let x = lcg(n * din, 11);
        let w = lcg(din * dout, 12);
        let b = lcg(dout, 13);
        let up = lcg(n * dout, 14);
        let f = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            linear(x, n, din, w, Some(b), dout).iter().zip(&up).map(|(a, c)| a * c).sum()
        };
        let (mut dw, mut db, mut dx) = (vec![0.0; din * dout], vec![0.0; dout], vec![0.0; n * din]);
        linear_backward(&x, n, din, &w, dout, &up, Some(&mut dw), Some(&mut db), Some(&mut dx));
        check(&|v| f(v, &w, &b), &x, &dx);
        check(&|v| f(&x, v, &b), &w, &dw);
        check(&|v| f(&x, &w, v), &b, &db);
    }

    #[test]
    fn time_embedding_shape_and_range() {
        let e = time_embedding(0.3f64, 32);
        assert_eq!(e.len(), 32);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(time_embedding(0.0f64, 4), vec![0.0, 0.0, 1.0, 1.0]);
    }
}
