use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::ops::{self, NormCache};
use super::{EncoderConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::tensor::{matmul, softmax_in_place, Real, Tensor};
use crate::wordpiece::{Encoded, PAD_ID};

/// Token ids and attention mask, `[batch_size, seq_len]` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn new(ids: Vec<u32>, attention_mask: Vec<u8>, batch_size: usize, seq_len: usize) -> Result<Self> {
        if ids.len() != batch_size * seq_len || attention_mask.len() != ids.len() {
            return Err(Error::Shape(format!(
                "batch of {batch_size}x{seq_len} with {} ids and {} mask entries",
                ids.len(),
                attention_mask.len()
            )));
        }
        Ok(Batch {
            ids,
            attention_mask,
            batch_size,
            seq_len,
        })
    }

    /// Pads variable-length rows to the longest one.
    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let seq_len = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * seq_len);
        let mut attention_mask = Vec::with_capacity(rows.len() * seq_len);
        for row in rows {
            ids.extend(row);
            attention_mask.extend(std::iter::repeat_n(1u8, row.len()));
            ids.extend(std::iter::repeat_n(PAD_ID, seq_len - row.len()));
            attention_mask.extend(std::iter::repeat_n(0u8, seq_len - row.len()));
        }
        Batch {
            ids,
            attention_mask,
            batch_size: rows.len(),
            seq_len,
        }
    }

    pub fn from_encoded(rows: &[Encoded]) -> Result<Self> {
        let seq_len = rows.first().map_or(0, |r| r.ids.len());
        if rows.iter().any(|r| r.ids.len() != seq_len) {
            return Err(Error::Shape("encoded rows differ in length".into()));
        }
        let ids = rows.iter().flat_map(|r| r.ids.iter().copied()).collect();
        let mask = rows.iter().flat_map(|r| r.attention_mask.iter().copied()).collect();
        Batch::new(ids, mask, rows.len(), seq_len)
    }
}

/// Which output head a forward pass evaluates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Head {
    /// Masked-LM logits at every position: `[batch, seq, vocab]`.
    Mlm,
    /// Masked-LM logits at the given flat positions (`b * seq_len + s`): `[n, vocab]`.
    MlmAt(Vec<usize>),
    /// Classification logits from the `[CLS]` position: `[batch, n_labels]`.
    Cls,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerCache<T> {
    pub input: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// `[batch, heads, seq, seq]` attention weights.
    pub probs: Vec<T>,
    pub ctx: Vec<T>,
    pub attn_drop: Option<Vec<T>>,
    pub attn_norm: NormCache<T>,
    pub attn_normed: Vec<T>,
    pub ff_pre: Vec<T>,
    pub ff_act: Vec<T>,
    pub ff_drop: Option<Vec<T>>,
    pub ff_norm: NormCache<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum HeadCache<T> {
    Mlm {
        rows: Vec<usize>,
        selected: Vec<T>,
        transform_pre: Vec<T>,
        norm: NormCache<T>,
        normed: Vec<T>,
    },
    Cls {
        pooled: Vec<T>,
        drop: Option<Vec<T>>,
    },
}

/// Activations of one forward pass, sufficient for exact gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub(crate) config: EncoderConfig,
    pub(crate) batch: Batch,
    pub(crate) emb_norm: NormCache<T>,
    pub(crate) emb_drop: Option<Vec<T>>,
    pub(crate) layers: Vec<LayerCache<T>>,
    pub(crate) head: HeadCache<T>,
    pub(crate) logits_shape: Vec<usize>,
}

impl<T> ForwardTrace<T> {
    pub fn logits_shape(&self) -> &[usize] {
        &self.logits_shape
    }

    pub fn batch(&self) -> &Batch {
        &self.batch
    }
}

impl<T: Real> ModelWeights<T> {
    /// Runs the encoder and the requested head.
    ///
    /// `dropout_seed` enables dropout (at the configured rate) with masks drawn
    /// from that seed; `None` gives a deterministic dropout-free pass.
    pub fn forward(
        &self,
        batch: &Batch,
        head: &Head,
        dropout_seed: Option<u64>,
    ) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        let c = &self.config;
        let (b, s, h) = (batch.batch_size, batch.seq_len, c.hidden_dim);
        let n = b * s;
        if batch.ids.len() != n || batch.attention_mask.len() != n {
            return Err(Error::Shape("batch ids/mask do not match batch_size x seq_len".into()));
        }
        if s > c.max_seq_len {
            return Err(Error::Shape(format!(
                "sequence length {s} exceeds max_seq_len {}",
                c.max_seq_len
            )));
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(Error::IdOutOfRange {
                id,
                vocab_size: c.vocab_size,
            });
        }
        match head {
            Head::MlmAt(rows) if rows.iter().any(|&r| r >= n) => {
                return Err(Error::Shape("masked-LM position out of range".into()))
            }
            Head::Cls if self.cls.is_none() => return Err(Error::MissingHead),
            _ => {}
        }

        let p = c.dropout_rate;
        let mut rng = dropout_seed.filter(|_| p > 0.0).map(ChaCha8Rng::seed_from_u64);
        let mut draw = |len: usize| rng.as_mut().map(|r| ops::dropout_mask::<T>(len, p, r));

        let mut x = vec![T::zero(); n * h];
        for (row, (&id, out)) in batch.ids.iter().zip(x.chunks_exact_mut(h)).enumerate() {
            let tok = self.token_embedding.row(id as usize);
            let pos = self.position_embedding.row(row % s);
            for ((o, &t), &q) in out.iter_mut().zip(tok).zip(pos) {
                *o = t + q;
            }
        }
        let (mut hidden, emb_norm) = ops::layer_norm(&x, h, &self.emb_norm_gamma, &self.emb_norm_beta);
        let emb_drop = draw(n * h);
        ops::apply_mask(&mut hidden, emb_drop.as_ref());

        let mut layers = Vec::with_capacity(self.layers.len());
        for lw in &self.layers {
            let input = hidden;
            let q = ops::linear(&input, &lw.query_w, &lw.query_b);
            let k = ops::linear(&input, &lw.key_w, &lw.key_b);
            let v = ops::linear(&input, &lw.value_w, &lw.value_b);
            let (probs, ctx) = attention(c, batch, &q, &k, &v);
            let mut attn_out = ops::linear(&ctx, &lw.attn_out_w, &lw.attn_out_b);
            let attn_drop = draw(n * h);
            ops::apply_mask(&mut attn_out, attn_drop.as_ref());
            for (a, &i) in attn_out.iter_mut().zip(&input) {
                *a = *a + i;
            }
            let (attn_normed, attn_norm) = ops::layer_norm(&attn_out, h, &lw.attn_norm_gamma, &lw.attn_norm_beta);

            let ff_pre = ops::linear(&attn_normed, &lw.ff_in_w, &lw.ff_in_b);
            let ff_act: Vec<T> = ff_pre.iter().map(|&u| ops::gelu(u)).collect();
            let mut ff_out = ops::linear(&ff_act, &lw.ff_out_w, &lw.ff_out_b);
            let ff_drop = draw(n * h);
            ops::apply_mask(&mut ff_out, ff_drop.as_ref());
            for (f, &a) in ff_out.iter_mut().zip(&attn_normed) {
                *f = *f + a;
            }
            let (out, ff_norm) = ops::layer_norm(&ff_out, h, &lw.ff_norm_gamma, &lw.ff_norm_beta);
            layers.push(LayerCache {
                input,
                q,
                k,
                v,
                probs,
                ctx,
                attn_drop,
                attn_norm,
                attn_normed,
                ff_pre,
                ff_act,
                ff_drop,
                ff_norm,
            });
            hidden = out;
        }

        let (logits, head_cache, logits_shape) = match head {
            Head::Mlm | Head::MlmAt(_) => {
                let rows: Vec<usize> = match head {
                    Head::MlmAt(rows) => rows.clone(),
                    _ => (0..n).collect(),
                };
                let mut selected = Vec::with_capacity(rows.len() * h);
                for &r in &rows {
                    selected.extend_from_slice(&hidden[r * h..(r + 1) * h]);
                }
                let transform_pre = ops::linear(&selected, &self.mlm_transform_w, &self.mlm_transform_b);
                let act: Vec<T> = transform_pre.iter().map(|&u| ops::gelu(u)).collect();
                let (normed, norm) = ops::layer_norm(&act, h, &self.mlm_norm_gamma, &self.mlm_norm_beta);
                let vsz = c.vocab_size;
                let mut logits = vec![T::zero(); rows.len() * vsz];
                for row in logits.chunks_exact_mut(vsz) {
                    row.copy_from_slice(&self.mlm_output_bias.data);
                }
                matmul(
                    &normed,
                    false,
                    &self.token_embedding.data,
                    true,
                    rows.len(),
                    h,
                    vsz,
                    &mut logits,
                    true,
                );
                let shape = match head {
                    Head::Mlm => vec![b, s, vsz],
                    _ => vec![rows.len(), vsz],
                };
                let cache = HeadCache::Mlm {
                    rows,
                    selected,
                    transform_pre,
                    norm,
                    normed,
                };
                (logits, cache, shape)
            }
            Head::Cls => {
                let cls = self.cls.as_ref().expect("checked above");
                let mut pooled = Vec::with_capacity(b * h);
                for i in 0..b {
                    pooled.extend_from_slice(&hidden[i * s * h..i * s * h + h]);
                }
                let drop = draw(b * h);
                ops::apply_mask(&mut pooled, drop.as_ref());
                let logits = ops::linear(&pooled, &cls.weight, &cls.bias);
                (logits, HeadCache::Cls { pooled, drop }, vec![b, c.n_labels])
            }
        };

        let trace = ForwardTrace {
            config: self.config,
            batch: batch.clone(),
            emb_norm,
            emb_drop,
            layers,
            head: head_cache,
            logits_shape: logits_shape.clone(),
        };
        Ok((Tensor::from_vec(&logits_shape, logits), trace))
    }

    /// Attention weights of every layer, `[batch, heads, seq, seq]` each.
    pub fn attention_weights(&self, batch: &Batch) -> Result<Vec<Tensor<T>>> {
        let (_, trace) = self.forward(batch, &Head::MlmAt(Vec::new()), None)?;
        let (b, s, nh) = (batch.batch_size, batch.seq_len, self.config.n_heads);
        Ok(trace
            .layers
            .into_iter()
            .map(|l| Tensor::from_vec(&[b, nh, s, s], l.probs))
            .collect())
    }
}

/// Multi-head scaled dot-product attention, parallel over samples.
/// Returns the attention weights and the concatenated per-head contexts.
fn attention<T: Real>(c: &EncoderConfig, batch: &Batch, q: &[T], k: &[T], v: &[T]) -> (Vec<T>, Vec<T>) {
    let (s, h, nh, dh) = (batch.seq_len, c.hidden_dim, c.n_heads, c.head_dim());
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mask_add = T::of(super::MASK_ADD);
    let mut probs = vec![T::zero(); batch.batch_size * nh * s * s];
    let mut ctx = vec![T::zero(); batch.batch_size * s * h];
    if s == 0 {
        return (probs, ctx);
    }
    probs
        .par_chunks_mut(nh * s * s)
        .zip(ctx.par_chunks_mut(s * h))
        .enumerate()
        .for_each(|(bi, (probs_b, ctx_b))| {
            let base = bi * s * h;
            let mask = &batch.attention_mask[bi * s..(bi + 1) * s];
            for a in 0..nh {
                let off = base + a * dh;
                let scores = &mut probs_b[a * s * s..(a + 1) * s * s];
                // scores = Q_a · K_a^T * scale
                T::gemm(
                    s,
                    dh,
                    s,
                    scale,
                    &q[off..],
                    h as isize,
                    1,
                    &k[off..],
                    1,
                    h as isize,
                    T::zero(),
                    scores,
                    s as isize,
                );
                for row in scores.chunks_exact_mut(s) {
                    for (x, &m) in row.iter_mut().zip(mask) {
                        if m == 0 {
                            *x = *x + mask_add;
                        }
                    }
                    softmax_in_place(row);
                }
                // ctx_a = P · V_a
                T::gemm(
                    s,
                    s,
                    dh,
                    T::one(),
                    scores,
                    s as isize,
                    1,
                    &v[off..],
                    h as isize,
                    1,
                    T::zero(),
                    &mut ctx_b[a * dh..],
                    h as isize,
                );
            }
        });
    (probs, ctx)
}
