#![allow(dead_code)]

use pathlm::encoder::{cls_loss, mlm_loss, Batch, EncoderConfig, Head, ModelWeights};

/// The small model used for gradient checks.
pub fn gradcheck_config() -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        hidden_dim: 16,
        n_heads: 2,
        ff_dim: 32,
        max_seq_len: 8,
        vocab_size: 30,
        dropout_rate: 0.1,
        n_labels: 3,
    }
}

/// Batch of 2 x 8 with the second row padded after 5 tokens.
pub fn gradcheck_batch() -> Batch {
    let ids = vec![2, 7, 12, 4, 9, 29, 15, 3, 2, 5, 4, 21, 3, 0, 0, 0];
    let mask = vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0];
    Batch::new(ids, mask, 2, 8).unwrap()
}

pub const MLM_POSITIONS: [(usize, usize); 4] = [(0, 1), (0, 3), (1, 2), (1, 3)];
pub const MLM_TARGETS: [u32; 16] = [2, 7, 12, 11, 9, 29, 15, 3, 2, 5, 26, 8, 3, 0, 0, 0];
pub const CLS_TARGETS: [f64; 6] = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];

#[derive(Clone, Copy, Debug)]
pub enum Objective {
    Mlm,
    Cls,
}

pub fn loss_value(w: &ModelWeights<f64>, batch: &Batch, obj: Objective, dropout: Option<u64>) -> f64 {
    match obj {
        Objective::Mlm => {
            let (logits, _) = w.forward(batch, &Head::Mlm, dropout).unwrap();
            mlm_loss(&logits, &MLM_TARGETS, &MLM_POSITIONS).unwrap().value
        }
        Objective::Cls => {
            let (logits, _) = w.forward(batch, &Head::Cls, dropout).unwrap();
            cls_loss(&logits, &CLS_TARGETS).unwrap().value
        }
    }
}

pub fn analytic_grads(w: &ModelWeights<f64>, batch: &Batch, obj: Objective, dropout: Option<u64>) -> ModelWeights<f64> {
    let head = match obj {
        Objective::Mlm => Head::Mlm,
        Objective::Cls => Head::Cls,
    };
    let (logits, trace) = w.forward(batch, &head, dropout).unwrap();
    let loss = match obj {
        Objective::Mlm => mlm_loss(&logits, &MLM_TARGETS, &MLM_POSITIONS).unwrap(),
        Objective::Cls => cls_loss(&logits, &CLS_TARGETS).unwrap(),
    };
    w.backward(&trace, &loss.dlogits).unwrap()
}

#[derive(Clone, Copy, Debug)]
pub enum Stencil {
    /// (f(x+h) - f(x-h)) / 2h
    Central,
    /// Sixth-order seven-point central difference.
    SevenPoint,
}

/// Largest relative error between analytic and finite-difference gradients
/// over every parameter entry, with the entry it occurred at.
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(
    w: &ModelWeights<f64>,
    batch: &Batch,
    obj: Objective,
    dropout: Option<u64>,
    stencil: Stencil,
    step: f64,
    floor: f64,
) -> (f64, String) {
    let grads = analytic_grads(w, batch, obj, dropout);
    let analytic: Vec<(String, Vec<f64>)> = grads
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data.clone()))
        .collect();
    let mut probe = w.clone();
    let mut worst = (0.0f64, String::new());
    for (ti, (name, a)) in analytic.iter().enumerate() {
        for (i, &grad) in a.iter().enumerate() {
            let orig = probe.tensors_mut()[ti].data[i];
            let mut at = |k: f64| {
                probe.tensors_mut()[ti].data[i] = orig + k * step;
                loss_value(&probe, batch, obj, dropout)
            };
            let numeric = match stencil {
                Stencil::Central => (at(1.0) - at(-1.0)) / (2.0 * step),
                Stencil::SevenPoint => {
                    (45.0 * (at(1.0) - at(-1.0)) - 9.0 * (at(2.0) - at(-2.0)) + (at(3.0) - at(-3.0))) / (60.0 * step)
                }
            };
            probe.tensors_mut()[ti].data[i] = orig;
            let err = (grad - numeric).abs() / grad.abs().max(numeric.abs()).max(floor);
            if err > worst.0 {
                worst = (err, format!("{name}[{i}] analytic {} numeric {numeric}", grad));
            }
        }
    }
    worst
}

/// A gradient-check model with non-trivial norm and bias parameters, so
/// every path through the network carries signal.
pub fn gradcheck_model(seed: u64) -> ModelWeights<f64> {
    use rand::{Rng, SeedableRng};
    let mut w = ModelWeights::<f32>::init(gradcheck_config(), seed)
        .unwrap()
        .cast::<f64>();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in w.tensors_mut() {
        for x in &mut t.data {
            *x += rng.random_range(-0.05..0.05);
        }
    }
    w
}
