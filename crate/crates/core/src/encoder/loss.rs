use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Real, Tensor};

/// A scalar loss and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss<T> {
    pub value: f64,
    pub dlogits: Tensor<T>,
}

/// Mean cross-entropy over rows of `[n, vocab]` logits.
pub fn mlm_loss_rows<T: Real>(logits: &Tensor<T>, targets: &[u32]) -> Result<Loss<T>> {
    if targets.is_empty() {
        return Err(Error::Invalid(
            "masked-LM loss needs at least one masked position".into(),
        ));
    }
    let vocab = *logits.shape.last().unwrap_or(&0);
    if logits.numel() != targets.len() * vocab {
        return Err(Error::Shape(format!(
            "{} targets for logits of shape {:?}",
            targets.len(),
            logits.shape
        )));
    }
    let inv_n = 1.0 / targets.len() as f64;
    let mut total = 0.0;
    let mut dlogits = Tensor::zeros(&logits.shape);
    for (i, &t) in targets.iter().enumerate() {
        if t as usize >= vocab {
            return Err(Error::IdOutOfRange {
                id: t,
                vocab_size: vocab,
            });
        }
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        total += lse - row[t as usize].f64();
        let drow = &mut dlogits.data[i * vocab..(i + 1) * vocab];
        for (d, &z) in drow.iter_mut().zip(row) {
            *d = T::of((z.f64() - lse).exp() * inv_n);
        }
        drow[t as usize] = drow[t as usize] - T::of(inv_n);
    }
    Ok(Loss {
        value: total * inv_n,
        dlogits,
    })
}

/// Mean cross-entropy at `mask_positions` of `[batch, seq, vocab]` logits;
/// `original_ids` is `[batch, seq]`.
pub fn mlm_loss<T: Real>(
    logits: &Tensor<T>,
    original_ids: &[u32],
    mask_positions: &[(usize, usize)],
) -> Result<Loss<T>> {
    let [b, s, v] = logits.shape[..] else {
        return Err(Error::Shape(format!(
            "expected [batch, seq, vocab] logits, got {:?}",
            logits.shape
        )));
    };
    if original_ids.len() != b * s {
        return Err(Error::Shape("original_ids do not match logits".into()));
    }
    if mask_positions.iter().any(|&(i, j)| i >= b || j >= s) {
        return Err(Error::Shape("mask position out of range".into()));
    }
    let rows: Vec<usize> = mask_positions.iter().map(|&(i, j)| i * s + j).collect();
    let mut gathered = Vec::with_capacity(rows.len() * v);
    for &r in &rows {
        gathered.extend_from_slice(logits.row(r));
    }
    let targets: Vec<u32> = rows.iter().map(|&r| original_ids[r]).collect();
    let inner = mlm_loss_rows(&Tensor::from_vec(&[rows.len(), v], gathered), &targets)?;
    let mut dlogits = Tensor::zeros(&logits.shape);
    for (i, &r) in rows.iter().enumerate() {
        for (d, &g) in dlogits.data[r * v..(r + 1) * v].iter_mut().zip(inner.dlogits.row(i)) {
            *d = *d + g;
        }
    }
    Ok(Loss {
        value: inner.value,
        dlogits,
    })
}

/// Mean sigmoid binary cross-entropy over every (sample, label) cell,
/// in the stable form `max(z, 0) - z t + ln(1 + e^{-|z|})`.
pub fn cls_loss<T: Real>(logits: &Tensor<T>, targets: &[f64]) -> Result<Loss<T>> {
    if logits.numel() != targets.len() {
        return Err(Error::Shape(format!(
            "{} targets for logits of shape {:?}",
            targets.len(),
            logits.shape
        )));
    }
    if let Some(t) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::Invalid(format!("classification target {t} is not 0 or 1")));
    }
    let inv_n = if targets.is_empty() {
        0.0
    } else {
        1.0 / targets.len() as f64
    };
    let mut total = 0.0;
    let mut dlogits = Tensor::zeros(&logits.shape);
    for ((d, &z), &t) in dlogits.data.iter_mut().zip(&logits.data).zip(targets) {
        let z = z.f64();
        total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        *d = T::of((sigmoid(z) - t) * inv_n);
    }
    Ok(Loss {
        value: total * inv_n,
        dlogits,
    })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
