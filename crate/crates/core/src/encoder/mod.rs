//! A BERT-style transformer encoder with masked-LM and multi-label
//! classification heads, and exact hand-derived gradients.
//!
//! Layout conventions: activations are row-major `[batch * seq, dim]`
//! matrices, dense weights are stored `[in, out]` so a layer computes
//! `x · W + b`. The masked-LM output projection reuses the token embedding
//! matrix (transposed) plus a free bias. There is no segment embedding.

mod adam;
mod backward;
pub mod checkpoint;
mod forward;
mod loss;
mod ops;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use adam::{adam_step, adam_update, AdamParams, AdamState};
pub use forward::{Batch, ForwardTrace, Head};
pub use loss::{cls_loss, mlm_loss, mlm_loss_rows, sigmoid, Loss};
pub use ops::{gelu, gelu_grad, LAYER_NORM_EPS, MASK_ADD};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    /// Width of the classification head; 0 means no head.
    pub n_labels: usize,
}

impl EncoderConfig {
    /// Desk-scale default: 2 layers, hidden 64, 2 heads, feed-forward 256.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            n_layers: 2,
            hidden_dim: 64,
            n_heads: 2,
            ff_dim: 256,
            max_seq_len: 64,
            vocab_size,
            dropout_rate: 0.1,
            n_labels: 0,
        }
    }

    /// BERT-Base dimensions.
    pub fn base(vocab_size: usize) -> Self {
        EncoderConfig {
            n_layers: 12,
            hidden_dim: 768,
            n_heads: 12,
            ff_dim: 3072,
            ..Self::desk(vocab_size)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 || self.hidden_dim == 0 || self.n_heads == 0 || self.ff_dim == 0 {
            return fail("layer, hidden, head and feed-forward sizes must be positive");
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return fail("hidden_dim must be divisible by n_heads");
        }
        if self.max_seq_len < 3 {
            return fail("max_seq_len must be at least 3");
        }
        if self.vocab_size < 6 {
            return fail("vocab_size must be at least 6");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail("dropout_rate must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub query_w: Tensor<T>,
    pub query_b: Tensor<T>,
    pub key_w: Tensor<T>,
    pub key_b: Tensor<T>,
    pub value_w: Tensor<T>,
    pub value_b: Tensor<T>,
    pub attn_out_w: Tensor<T>,
    pub attn_out_b: Tensor<T>,
    pub attn_norm_gamma: Tensor<T>,
    pub attn_norm_beta: Tensor<T>,
    pub ff_in_w: Tensor<T>,
    pub ff_in_b: Tensor<T>,
    pub ff_out_w: Tensor<T>,
    pub ff_out_b: Tensor<T>,
    pub ff_norm_gamma: Tensor<T>,
    pub ff_norm_beta: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsHead<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// All parameters of the encoder. The same type doubles as a gradient map
/// and as Adam moment storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub config: EncoderConfig,
    pub token_embedding: Tensor<T>,
    pub position_embedding: Tensor<T>,
    pub emb_norm_gamma: Tensor<T>,
    pub emb_norm_beta: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub mlm_transform_w: Tensor<T>,
    pub mlm_transform_b: Tensor<T>,
    pub mlm_norm_gamma: Tensor<T>,
    pub mlm_norm_beta: Tensor<T>,
    pub mlm_output_bias: Tensor<T>,
    pub cls: Option<ClsHead<T>>,
}

/// How a tensor is initialized.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

impl<T: Real> LayerWeights<T> {
    fn build(c: &EncoderConfig, mut make: impl FnMut(&[usize], Init) -> Tensor<T>) -> Self {
        let (h, f) = (c.hidden_dim, c.ff_dim);
        LayerWeights {
            query_w: make(&[h, h], Init::Normal),
            query_b: make(&[h], Init::Zeros),
            key_w: make(&[h, h], Init::Normal),
            key_b: make(&[h], Init::Zeros),
            value_w: make(&[h, h], Init::Normal),
            value_b: make(&[h], Init::Zeros),
            attn_out_w: make(&[h, h], Init::Normal),
            attn_out_b: make(&[h], Init::Zeros),
            attn_norm_gamma: make(&[h], Init::Ones),
            attn_norm_beta: make(&[h], Init::Zeros),
            ff_in_w: make(&[h, f], Init::Normal),
            ff_in_b: make(&[f], Init::Zeros),
            ff_out_w: make(&[f, h], Init::Normal),
            ff_out_b: make(&[h], Init::Zeros),
            ff_norm_gamma: make(&[h], Init::Ones),
            ff_norm_beta: make(&[h], Init::Zeros),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor<T>); 16] {
        [
            ("attention.query.weight", &self.query_w),
            ("attention.query.bias", &self.query_b),
            ("attention.key.weight", &self.key_w),
            ("attention.key.bias", &self.key_b),
            ("attention.value.weight", &self.value_w),
            ("attention.value.bias", &self.value_b),
            ("attention.output.weight", &self.attn_out_w),
            ("attention.output.bias", &self.attn_out_b),
            ("attention.norm.gamma", &self.attn_norm_gamma),
            ("attention.norm.beta", &self.attn_norm_beta),
            ("ffn.input.weight", &self.ff_in_w),
            ("ffn.input.bias", &self.ff_in_b),
            ("ffn.output.weight", &self.ff_out_w),
            ("ffn.output.bias", &self.ff_out_b),
            ("ffn.norm.gamma", &self.ff_norm_gamma),
            ("ffn.norm.beta", &self.ff_norm_beta),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 16] {
        [
            &mut self.query_w,
            &mut self.query_b,
            &mut self.key_w,
            &mut self.key_b,
            &mut self.value_w,
            &mut self.value_b,
            &mut self.attn_out_w,
            &mut self.attn_out_b,
            &mut self.attn_norm_gamma,
            &mut self.attn_norm_beta,
            &mut self.ff_in_w,
            &mut self.ff_in_b,
            &mut self.ff_out_w,
            &mut self.ff_out_b,
            &mut self.ff_norm_gamma,
            &mut self.ff_norm_beta,
        ]
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> f64 {
    loop {
        let x = normal.sample(rng);
        if x.abs() <= 2.0 * INIT_STD {
            return x;
        }
    }
}

impl<T: Real> ModelWeights<T> {
    fn build(config: EncoderConfig, mut make: impl FnMut(&[usize], Init) -> Tensor<T>) -> Self {
        let (h, v) = (config.hidden_dim, config.vocab_size);
        let token_embedding = make(&[v, h], Init::Normal);
        let position_embedding = make(&[config.max_seq_len, h], Init::Normal);
        let emb_norm_gamma = make(&[h], Init::Ones);
        let emb_norm_beta = make(&[h], Init::Zeros);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights::build(&config, &mut make))
            .collect();
        let mlm_transform_w = make(&[h, h], Init::Normal);
        let mlm_transform_b = make(&[h], Init::Zeros);
        let mlm_norm_gamma = make(&[h], Init::Ones);
        let mlm_norm_beta = make(&[h], Init::Zeros);
        let mlm_output_bias = make(&[v], Init::Zeros);
        let cls = (config.n_labels > 0).then(|| ClsHead {
            weight: make(&[h, config.n_labels], Init::Normal),
            bias: make(&[config.n_labels], Init::Zeros),
        });
        ModelWeights {
            config,
            token_embedding,
            position_embedding,
            emb_norm_gamma,
            emb_norm_beta,
            layers,
            mlm_transform_w,
            mlm_transform_b,
            mlm_norm_gamma,
            mlm_norm_beta,
            mlm_output_bias,
            cls,
        }
    }

    /// Weight matrices from a zero-mean normal with std 0.02 truncated at two
    /// standard deviations; biases and norm shifts zero, norm scales one.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        Ok(Self::build(config, |shape, init| match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Normal => {
                let n = shape.iter().product();
                let data = (0..n).map(|_| T::of(truncated_normal(&mut rng, &normal))).collect();
                Tensor::from_vec(shape, data)
            }
        }))
    }

    /// All-zero tensors with this model's shapes.
    pub fn zeros_like(&self) -> Self {
        Self::build(self.config, |shape, _| Tensor::zeros(shape))
    }

    pub fn zeros(config: EncoderConfig) -> Self {
        Self::build(config, |shape, _| Tensor::zeros(shape))
    }

    /// Replaces the classification head with a freshly initialized one of
    /// width `n_labels` (0 removes it).
    pub fn with_cls_head(mut self, n_labels: usize, seed: u64) -> Self {
        self.config.n_labels = n_labels;
        self.cls = (n_labels > 0).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, INIT_STD).expect("valid std");
            let h = self.config.hidden_dim;
            let data = (0..h * n_labels)
                .map(|_| T::of(truncated_normal(&mut rng, &normal)))
                .collect();
            ClsHead {
                weight: Tensor::from_vec(&[h, n_labels], data),
                bias: Tensor::zeros(&[n_labels]),
            }
        });
        self
    }

    /// Named tensors in a fixed canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("embeddings.token".into(), &self.token_embedding),
            ("embeddings.position".into(), &self.position_embedding),
            ("embeddings.norm.gamma".into(), &self.emb_norm_gamma),
            ("embeddings.norm.beta".into(), &self.emb_norm_beta),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.tensors().into_iter().map(|(n, t)| (format!("layer.{l}.{n}"), t)));
        }
        out.extend([
            ("mlm.transform.weight".into(), &self.mlm_transform_w),
            ("mlm.transform.bias".into(), &self.mlm_transform_b),
            ("mlm.norm.gamma".into(), &self.mlm_norm_gamma),
            ("mlm.norm.beta".into(), &self.mlm_norm_beta),
            ("mlm.output_bias".into(), &self.mlm_output_bias),
        ]);
        if let Some(cls) = &self.cls {
            out.push(("cls.weight".into(), &cls.weight));
            out.push(("cls.bias".into(), &cls.bias));
        }
        out
    }

    /// Mutable tensors in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.emb_norm_gamma,
            &mut self.emb_norm_beta,
        ];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([
            &mut self.mlm_transform_w,
            &mut self.mlm_transform_b,
            &mut self.mlm_norm_gamma,
            &mut self.mlm_norm_beta,
            &mut self.mlm_output_bias,
        ]);
        if let Some(cls) = &mut self.cls {
            out.push(&mut cls.weight);
            out.push(&mut cls.bias);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        let mut out = ModelWeights::<U>::zeros(self.config);
        for (dst, (_, src)) in out.tensors_mut().into_iter().zip(self.named_tensors()) {
            *dst = src.cast();
        }
        out
    }

    pub fn scale(&mut self, c: T) {
        self.tensors_mut().into_iter().for_each(|t| t.scale(c));
    }
}
