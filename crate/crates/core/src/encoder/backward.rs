use rayon::prelude::*;

use super::forward::{ForwardTrace, HeadCache};
use super::ops;
use super::ModelWeights;
use crate::error::{Error, Result};
use crate::tensor::{matmul, Real, Tensor};

impl<T: Real> ModelWeights<T> {
    /// Exact gradients of a scalar loss with respect to every weight, given
    /// the loss gradient `dlogits` for the logits produced with `trace`.
    pub fn backward(&self, trace: &ForwardTrace<T>, dlogits: &Tensor<T>) -> Result<ModelWeights<T>> {
        if trace.config != self.config {
            return Err(Error::Shape(
                "trace was produced by a model with a different config".into(),
            ));
        }
        if dlogits.shape != trace.logits_shape {
            return Err(Error::Shape(format!(
                "loss gradient shape {:?} does not match logits {:?}",
                dlogits.shape, trace.logits_shape
            )));
        }
        let c = &self.config;
        let batch = &trace.batch;
        let (b, s, h) = (batch.batch_size, batch.seq_len, c.hidden_dim);
        let n = b * s;
        let mut g = self.zeros_like();
        let mut dhidden = vec![T::zero(); n * h];

        match &trace.head {
            HeadCache::Mlm {
                rows,
                selected,
                transform_pre,
                norm,
                normed,
            } => {
                let m = rows.len();
                let vsz = c.vocab_size;
                let dl = &dlogits.data;
                ops::add_column_sums(dl, vsz, &mut g.mlm_output_bias.data);
                // Tied output projection: logits = normed · E^T.
                let mut dnormed = vec![T::zero(); m * h];
                matmul(
                    dl,
                    false,
                    &self.token_embedding.data,
                    false,
                    m,
                    vsz,
                    h,
                    &mut dnormed,
                    false,
                );
                matmul(dl, true, normed, false, vsz, m, h, &mut g.token_embedding.data, true);
                let mut dact = ops::layer_norm_backward(
                    &dnormed,
                    h,
                    norm,
                    &self.mlm_norm_gamma,
                    &mut g.mlm_norm_gamma,
                    &mut g.mlm_norm_beta,
                );
                for (d, &u) in dact.iter_mut().zip(transform_pre) {
                    *d = *d * ops::gelu_grad(u);
                }
                let dsel = ops::linear_backward(
                    selected,
                    &dact,
                    &self.mlm_transform_w,
                    &mut g.mlm_transform_w,
                    &mut g.mlm_transform_b,
                );
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..h {
                        dhidden[r * h + j] = dhidden[r * h + j] + dsel[i * h + j];
                    }
                }
            }
            HeadCache::Cls { pooled, drop } => {
                let cls = self.cls.as_ref().ok_or(Error::MissingHead)?;
                let gcls = g.cls.as_mut().ok_or(Error::MissingHead)?;
                let mut dpooled =
                    ops::linear_backward(pooled, &dlogits.data, &cls.weight, &mut gcls.weight, &mut gcls.bias);
                ops::apply_mask(&mut dpooled, drop.as_ref());
                for i in 0..b {
                    for j in 0..h {
                        dhidden[i * s * h + j] = dhidden[i * s * h + j] + dpooled[i * h + j];
                    }
                }
            }
        }

        for (l, cache) in trace.layers.iter().enumerate().rev() {
            let lw = &self.layers[l];
            let gl = &mut g.layers[l];

            // out = LN(attn_normed + drop(ffn(attn_normed)))
            let dres = ops::layer_norm_backward(
                &dhidden,
                h,
                &cache.ff_norm,
                &lw.ff_norm_gamma,
                &mut gl.ff_norm_gamma,
                &mut gl.ff_norm_beta,
            );
            let mut dff_out = dres.clone();
            ops::apply_mask(&mut dff_out, cache.ff_drop.as_ref());
            let mut dact = ops::linear_backward(
                &cache.ff_act,
                &dff_out,
                &lw.ff_out_w,
                &mut gl.ff_out_w,
                &mut gl.ff_out_b,
            );
            for (d, &u) in dact.iter_mut().zip(&cache.ff_pre) {
                *d = *d * ops::gelu_grad(u);
            }
            let dnormed_ff =
                ops::linear_backward(&cache.attn_normed, &dact, &lw.ff_in_w, &mut gl.ff_in_w, &mut gl.ff_in_b);
            let dattn_normed: Vec<T> = dres.iter().zip(&dnormed_ff).map(|(&a, &b)| a + b).collect();

            // attn_normed = LN(input + drop(attn(input)))
            let dres = ops::layer_norm_backward(
                &dattn_normed,
                h,
                &cache.attn_norm,
                &lw.attn_norm_gamma,
                &mut gl.attn_norm_gamma,
                &mut gl.attn_norm_beta,
            );
            let mut dattn_out = dres.clone();
            ops::apply_mask(&mut dattn_out, cache.attn_drop.as_ref());
            let dctx = ops::linear_backward(
                &cache.ctx,
                &dattn_out,
                &lw.attn_out_w,
                &mut gl.attn_out_w,
                &mut gl.attn_out_b,
            );
            let (dq, dk, dv) =
                attention_backward(&self.config, trace, &cache.q, &cache.k, &cache.v, &cache.probs, &dctx);
            let mut dinput = dres;
            for (dy, w, dw, db) in [
                (&dq, &lw.query_w, &mut gl.query_w, &mut gl.query_b),
                (&dk, &lw.key_w, &mut gl.key_w, &mut gl.key_b),
                (&dv, &lw.value_w, &mut gl.value_w, &mut gl.value_b),
            ] {
                let dx = ops::linear_backward(&cache.input, dy, w, dw, db);
                for (a, b) in dinput.iter_mut().zip(dx) {
                    *a = *a + b;
                }
            }
            dhidden = dinput;
        }

        ops::apply_mask(&mut dhidden, trace.emb_drop.as_ref());
        let dx = ops::layer_norm_backward(
            &dhidden,
            h,
            &trace.emb_norm,
            &self.emb_norm_gamma,
            &mut g.emb_norm_gamma,
            &mut g.emb_norm_beta,
        );
        for (row, (&id, d)) in batch.ids.iter().zip(dx.chunks_exact(h)).enumerate() {
            let tok = &mut g.token_embedding.data[id as usize * h..(id as usize + 1) * h];
            for (t, &v) in tok.iter_mut().zip(d) {
                *t = *t + v;
            }
            let pos = &mut g.position_embedding.data[(row % s) * h..(row % s + 1) * h];
            for (p, &v) in pos.iter_mut().zip(d) {
                *p = *p + v;
            }
        }
        Ok(g)
    }
}

/// Gradients of Q, K, V given the gradient of the attention context.
fn attention_backward<T: Real>(
    c: &super::EncoderConfig,
    trace: &ForwardTrace<T>,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dctx: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let batch = &trace.batch;
    let (s, h, nh, dh) = (batch.seq_len, c.hidden_dim, c.n_heads, c.head_dim());
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let total = batch.batch_size * s * h;
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); total], vec![T::zero(); total], vec![T::zero(); total]);
    if s == 0 {
        return (dq, dk, dv);
    }
    dq.par_chunks_mut(s * h)
        .zip(dk.par_chunks_mut(s * h))
        .zip(dv.par_chunks_mut(s * h))
        .enumerate()
        .for_each(|(bi, ((dq_b, dk_b), dv_b))| {
            let base = bi * s * h;
            let mut dp = vec![T::zero(); s * s];
            for a in 0..nh {
                let off = base + a * dh;
                let p = &probs[(bi * nh + a) * s * s..(bi * nh + a + 1) * s * s];
                // dP = dctx_a · V_a^T
                T::gemm(
                    s,
                    dh,
                    s,
                    T::one(),
                    &dctx[off..],
                    h as isize,
                    1,
                    &v[off..],
                    1,
                    h as isize,
                    T::zero(),
                    &mut dp,
                    s as isize,
                );
                // dV_a = P^T · dctx_a
                T::gemm(
                    s,
                    s,
                    dh,
                    T::one(),
                    p,
                    1,
                    s as isize,
                    &dctx[off..],
                    h as isize,
                    1,
                    T::zero(),
                    &mut dv_b[a * dh..],
                    h as isize,
                );
                // softmax backward: dS = P * (dP - rowsum(dP * P))
                for (dp_row, p_row) in dp.chunks_exact_mut(s).zip(p.chunks_exact(s)) {
                    let dot: f64 = dp_row.iter().zip(p_row).map(|(&x, &y)| (x * y).f64()).sum();
                    let dot = T::of(dot);
                    for (x, &y) in dp_row.iter_mut().zip(p_row) {
                        *x = y * (*x - dot);
                    }
                }
                // dQ_a = dS · K_a * scale, dK_a = dS^T · Q_a * scale
                T::gemm(
                    s,
                    s,
                    dh,
                    scale,
                    &dp,
                    s as isize,
                    1,
                    &k[off..],
                    h as isize,
                    1,
                    T::zero(),
                    &mut dq_b[a * dh..],
                    h as isize,
                );
                T::gemm(
                    s,
                    s,
                    dh,
                    scale,
                    &dp,
                    1,
                    s as isize,
                    &q[off..],
                    h as isize,
                    1,
                    T::zero(),
                    &mut dk_b[a * dh..],
                    h as isize,
                );
            }
        });
    (dq, dk, dv)
}
