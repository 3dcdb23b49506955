//! Transformer layer forward/backward passes with explicit caches.
//!
//! Blocks are pre-norm: z' = z + MSA(LN(z)), z'' = z' + MLP(LN(z')).
//! Each forward returns the cache its backward needs; backward functions
//! accumulate parameter gradients and return the input gradient.

use crate::scalar::Scalar;
use ndarray::{s, Array1, Array2, Axis};

const LN_EPS: f64 = 1e-6;

/// Weights of one transformer block. The same struct doubles as the gradient
/// accumulator for the block.
#[derive(Debug, Clone)]
pub struct BlockParams<T> {
    pub ln1_g: Array2<T>,
    pub ln1_b: Array2<T>,
    /// (D, 3D): query, key, value projections side by side.
    pub qkv_w: Array2<T>,
    pub qkv_b: Array2<T>,
    pub proj_w: Array2<T>,
    pub proj_b: Array2<T>,
    pub ln2_g: Array2<T>,
    pub ln2_b: Array2<T>,
    pub mlp1_w: Array2<T>,
    pub mlp1_b: Array2<T>,
    pub mlp2_w: Array2<T>,
    pub mlp2_b: Array2<T>,
}

impl<T: Scalar> BlockParams<T> {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        BlockParams {
            ln1_g: Array2::zeros((1, dim)),
            ln1_b: Array2::zeros((1, dim)),
            qkv_w: Array2::zeros((dim, 3 * dim)),
            qkv_b: Array2::zeros((1, 3 * dim)),
            proj_w: Array2::zeros((dim, dim)),
            proj_b: Array2::zeros((1, dim)),
            ln2_g: Array2::zeros((1, dim)),
            ln2_b: Array2::zeros((1, dim)),
            mlp1_w: Array2::zeros((dim, hidden)),
            mlp1_b: Array2::zeros((1, hidden)),
            mlp2_w: Array2::zeros((hidden, dim)),
            mlp2_b: Array2::zeros((1, dim)),
        }
    }
}

pub struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

pub fn layer_norm<T: Scalar>(
    x: &Array2<T>,
    gamma: &Array2<T>,
    beta: &Array2<T>,
) -> (Array2<T>, LnCache<T>) {
    let d = x.ncols();
    let inv_d = T::from_real(1.0 / d as f64);
    let eps = T::from_real(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() * inv_d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b) * inv_d;
        let inv = (var + eps).sqrt().recip();
        row.mapv_inplace(|v| v * inv);
        *is = inv;
    }
    let y = &xhat * gamma + beta;
    (y, LnCache { xhat, inv_std })
}

/// Returns dx; accumulates dgamma/dbeta.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LnCache<T>,
    gamma: &Array2<T>,
    dy: &Array2<T>,
    dgamma: &mut Array2<T>,
    dbeta: &mut Array2<T>,
) -> Array2<T> {
    let d = dy.ncols();
    let inv_d = T::from_real(1.0 / d as f64);
    *dgamma = &*dgamma + &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *dbeta = &*dbeta + &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let xh = cache.xhat.row(i);
        let dxh = dxhat.row(i);
        let mean_dxh = dxh.sum() * inv_d;
        let mean_dxh_xh = dxh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).fold(T::zero(), |a, b| a + b) * inv_d;
        let inv = cache.inv_std[i];
        for j in 0..d {
            dx[(i, j)] = inv * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_real(0.7978845608028654); // sqrt(2/pi)
    let k = T::from_real(0.044715);
    let half = T::from_real(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_real(0.7978845608028654);
    let k = T::from_real(0.044715);
    let half = T::from_real(0.5);
    let three = T::from_real(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

pub struct AttnCache<T> {
    input: Array2<T>,
    qkv: Array2<T>,
    /// Row-softmax attention weights, one (S, S) matrix per head.
    attn: Vec<Array2<T>>,
    o_concat: Array2<T>,
}

pub fn attention<T: Scalar>(
    p: &BlockParams<T>,
    a: &Array2<T>,
    n_heads: usize,
) -> (Array2<T>, AttnCache<T>) {
    let (s_len, dim) = a.dim();
    let dh = dim / n_heads;
    let scale = T::from_real(1.0 / (dh as f64).sqrt());
    let qkv = a.dot(&p.qkv_w) + &p.qkv_b;
    let mut o_concat = Array2::zeros((s_len, dim));
    let mut attn = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., dim + h * dh..dim + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * dim + h * dh..2 * dim + (h + 1) * dh]);
        let mut scores = q.dot(&k.t()) * scale;
        for mut row in scores.rows_mut() {
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        let o = scores.dot(&v);
        o_concat.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&o);
        attn.push(scores);
    }
    let out = o_concat.dot(&p.proj_w) + &p.proj_b;
    (out, AttnCache { input: a.clone(), qkv, attn, o_concat })
}

pub fn attention_backward<T: Scalar>(
    p: &BlockParams<T>,
    cache: &AttnCache<T>,
    dout: &Array2<T>,
    grads: &mut BlockParams<T>,
    n_heads: usize,
) -> Array2<T> {
    let (s_len, dim) = cache.input.dim();
    let dh = dim / n_heads;
    let scale = T::from_real(1.0 / (dh as f64).sqrt());

    grads.proj_w = &grads.proj_w + &cache.o_concat.t().dot(dout);
    grads.proj_b = &grads.proj_b + &dout.sum_axis(Axis(0)).insert_axis(Axis(0));
    let do_concat = dout.dot(&p.proj_w.t());

    let mut dqkv = Array2::zeros((s_len, 3 * dim));
    for h in 0..n_heads {
        let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = cache.qkv.slice(s![.., dim + h * dh..dim + (h + 1) * dh]);
        let v = cache.qkv.slice(s![.., 2 * dim + h * dh..2 * dim + (h + 1) * dh]);
        let a = &cache.attn[h];
        let do_h = do_concat.slice(s![.., h * dh..(h + 1) * dh]);

        let dv = a.t().dot(&do_h);
        let da = do_h.dot(&v.t());
        // softmax backward per row: ds = a * (da - rowsum(da * a))
        let mut ds = Array2::zeros((s_len, s_len));
        for i in 0..s_len {
            let mut dot = T::zero();
            for j in 0..s_len {
                dot = dot + da[(i, j)] * a[(i, j)];
            }
            for j in 0..s_len {
                ds[(i, j)] = a[(i, j)] * (da[(i, j)] - dot);
            }
        }
        let dq = ds.dot(&k) * scale;
        let dk = ds.t().dot(&q) * scale;
        dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
        dqkv.slice_mut(s![.., dim + h * dh..dim + (h + 1) * dh]).assign(&dk);
        dqkv.slice_mut(s![.., 2 * dim + h * dh..2 * dim + (h + 1) * dh]).assign(&dv);
    }

    grads.qkv_w = &grads.qkv_w + &cache.input.t().dot(&dqkv);
    grads.qkv_b = &grads.qkv_b + &dqkv.sum_axis(Axis(0)).insert_axis(Axis(0));
    dqkv.dot(&p.qkv_w.t())
}

pub struct MlpCache<T> {
    input: Array2<T>,
    h_pre: Array2<T>,
    h_act: Array2<T>,
}

pub fn mlp<T: Scalar>(p: &BlockParams<T>, x: &Array2<T>) -> (Array2<T>, MlpCache<T>) {
    let h_pre = x.dot(&p.mlp1_w) + &p.mlp1_b;
    let h_act = h_pre.mapv(gelu);
    let out = h_act.dot(&p.mlp2_w) + &p.mlp2_b;
    (out, MlpCache { input: x.clone(), h_pre, h_act })
}

pub fn mlp_backward<T: Scalar>(
    p: &BlockParams<T>,
    cache: &MlpCache<T>,
    dout: &Array2<T>,
    grads: &mut BlockParams<T>,
) -> Array2<T> {
    grads.mlp2_w = &grads.mlp2_w + &cache.h_act.t().dot(dout);
    grads.mlp2_b = &grads.mlp2_b + &dout.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dh_act = dout.dot(&p.mlp2_w.t());
    let dh_pre = &dh_act * &cache.h_pre.mapv(gelu_grad);
    grads.mlp1_w = &grads.mlp1_w + &cache.input.t().dot(&dh_pre);
    grads.mlp1_b = &grads.mlp1_b + &dh_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
    dh_pre.dot(&p.mlp1_w.t())
}

pub struct BlockCache<T> {
    ln1: LnCache<T>,
    attn: AttnCache<T>,
    ln2: LnCache<T>,
    mlp: MlpCache<T>,
}

pub fn block_forward<T: Scalar>(
    p: &BlockParams<T>,
    z: &Array2<T>,
    n_heads: usize,
) -> (Array2<T>, BlockCache<T>) {
    let (a, ln1) = layer_norm(z, &p.ln1_g, &p.ln1_b);
    let (attn_out, attn) = attention(p, &a, n_heads);
    let z1 = z + &attn_out;
    let (b, ln2) = layer_norm(&z1, &p.ln2_g, &p.ln2_b);
    let (mlp_out, mlp_c) = mlp(p, &b);
    let z2 = &z1 + &mlp_out;
    (z2, BlockCache { ln1, attn, ln2, mlp: mlp_c })
}

pub fn block_backward<T: Scalar>(
    p: &BlockParams<T>,
    cache: &BlockCache<T>,
    dz_out: &Array2<T>,
    grads: &mut BlockParams<T>,
    n_heads: usize,
) -> Array2<T> {
    let db = mlp_backward(p, &cache.mlp, dz_out, grads);
    let dz1 = dz_out + &layer_norm_backward(&cache.ln2, &p.ln2_g, &db, &mut grads.ln2_g, &mut grads.ln2_b);
    let da = attention_backward(p, &cache.attn, &dz1, grads, n_heads);
    &dz1 + &layer_norm_backward(&cache.ln1, &p.ln1_g, &da, &mut grads.ln1_g, &mut grads.ln1_b)
}
