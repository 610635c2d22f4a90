//! Masked-LM corruption, pretraining, and multi-label fine-tuning.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{make_split, CorpusSplit, DiagnosisElement};
use crate::encoder::checkpoint::{self, CheckpointHeader};
use crate::encoder::{
    adam_step, cls_loss, mlm_loss_rows, sigmoid, AdamParams, AdamState, Batch, EncoderConfig, Head, ModelWeights,
};
use crate::error::{Error, Result};
use crate::evaluation::{top_k_hit, LabelCounts};
use crate::seed;
use crate::wordpiece::{encode_unpadded, Vocabulary, MASK_ID, N_SPECIAL};

/// A batch after masked-LM corruption. All id arrays are `[batch_size, seq_len]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub input_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub original_ids: Vec<u32>,
    /// Selected positions of each sample, ascending.
    pub mask_positions: Vec<Vec<usize>>,
    pub corruption_seed: u64,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl MaskedBatch {
    /// The corrupted inputs as a model batch.
    pub fn batch(&self) -> Batch {
        Batch {
            ids: self.input_ids.clone(),
            attention_mask: self.attention_mask.clone(),
            batch_size: self.batch_size,
            seq_len: self.seq_len,
        }
    }

    /// Selected positions as flat `b * seq_len + s` indices, sample-major.
    pub fn flat_positions(&self) -> Vec<usize> {
        self.mask_positions
            .iter()
            .enumerate()
            .flat_map(|(b, ps)| ps.iter().map(move |&s| b * self.seq_len + s))
            .collect()
    }

    /// Original ids at the selected positions, in [`Self::flat_positions`] order.
    pub fn targets(&self) -> Vec<u32> {
        self.flat_positions()
            .into_iter()
            .map(|i| self.original_ids[i])
            .collect()
    }

    pub fn n_masked(&self) -> usize {
        self.mask_positions.iter().map(Vec::len).sum()
    }
}

fn eligible(id: u32, mask: u8) -> bool {
    mask == 1 && id >= N_SPECIAL
}

/// Selects each eligible position (attended, non-special) with probability
/// `mask_rate`, forcing one uniformly chosen position when none is drawn.
/// Selected positions become `[MASK]` 80% of the time, a uniform random
/// non-special token 10%, and stay unchanged 10%.
pub fn corrupt(batch: &Batch, vocab_size: usize, mask_rate: f64, seed: u64) -> Result<MaskedBatch> {
    if !(mask_rate > 0.0 && mask_rate <= 1.0) {
        return Err(Error::Config(format!("mask rate must be in (0, 1], got {mask_rate}")));
    }
    if vocab_size <= N_SPECIAL as usize {
        return Err(Error::Config(format!(
            "vocabulary of {vocab_size} has no regular tokens"
        )));
    }
    let mut rng = seed::rng(seed, &[]);
    let mut input_ids = batch.ids.clone();
    let mut mask_positions = Vec::with_capacity(batch.batch_size);
    for b in 0..batch.batch_size {
        let row = b * batch.seq_len..(b + 1) * batch.seq_len;
        let candidates: Vec<usize> = (0..batch.seq_len)
            .filter(|&s| eligible(batch.ids[row.start + s], batch.attention_mask[row.start + s]))
            .collect();
        if candidates.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut chosen: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|_| rng.random::<f64>() < mask_rate)
            .collect();
        if chosen.is_empty() {
            chosen.push(candidates[rng.random_range(0..candidates.len())]);
        }
        for &s in &chosen {
            let u: f64 = rng.random();
            if u < 0.8 {
                input_ids[row.start + s] = MASK_ID;
            } else if u < 0.9 {
                input_ids[row.start + s] = rng.random_range(N_SPECIAL..vocab_size as u32);
            }
        }
        mask_positions.push(chosen);
    }
    Ok(MaskedBatch {
        input_ids,
        attention_mask: batch.attention_mask.clone(),
        original_ids: batch.ids.clone(),
        mask_positions,
        corruption_seed: seed,
        batch_size: batch.batch_size,
        seq_len: batch.seq_len,
    })
}

/// Encodes texts as `[CLS] pieces [SEP]` rows, dropping rows with no
/// maskable token. Returns the kept rows and their source indices.
pub fn encode_maskable(texts: &[&str], vocab: &Vocabulary, max_len: usize) -> (Vec<Vec<u32>>, Vec<usize>) {
    let rows: Vec<Vec<u32>> = texts.par_iter().map(|t| encode_unpadded(t, vocab, max_len)).collect();
    rows.into_iter()
        .enumerate()
        .filter(|(_, r)| r.iter().any(|&id| id >= N_SPECIAL))
        .map(|(i, r)| (r, i))
        .unzip()
}

/// One row of a training log. `val_metric` is present only on evaluation steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
}

/// `step,train_loss,val_metric` CSV.
pub fn log_csv(rows: &[LogRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "train_loss", "val_metric"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            format!("{:.8}", r.train_loss),
            r.val_metric.map_or(String::new(), |v| format!("{v:.8}")),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Invalid(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub mask_rate: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub total_steps: usize,
    /// Validation interval in steps; 0 evaluates only after the last step.
    pub eval_every: usize,
    /// Checkpoint interval in steps when a checkpoint directory is given; 0 disables.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub adam: AdamParams,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mask_rate: 0.15,
            batch_size: 32,
            lr: 2e-5,
            total_steps: 300_000,
            eval_every: 1000,
            checkpoint_every: 0,
            seed: 42,
            adam: AdamParams::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!(
                "mask_rate must be in (0, 1), got {}",
                self.mask_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub weights: ModelWeights<f32>,
    pub log: Vec<LogRow>,
    /// Checkpoints written during training, oldest first.
    pub checkpoints: Vec<PathBuf>,
}

/// Masked top-1 accuracy with dropout off, masking each chunk of `rows`
/// under a seed derived from `seed` and the chunk index.
pub fn masked_accuracy(
    weights: &ModelWeights<f32>,
    rows: &[Vec<u32>],
    mask_rate: f64,
    seed: u64,
    chunk: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (ci, part) in rows.chunks(chunk.max(1)).enumerate() {
        let masked = corrupt(
            &Batch::from_rows(part),
            weights.config.vocab_size,
            mask_rate,
            seed::derive(seed, &[ci as u64]),
        )?;
        let (logits, _) = weights.forward(&masked.batch(), &Head::MlmAt(masked.flat_positions()), None)?;
        let v = weights.config.vocab_size;
        for (i, &t) in masked.targets().iter().enumerate() {
            hits += top_k_hit(&logits.data[i * v..(i + 1) * v], t, 1) as usize;
        }
        total += masked.n_masked();
    }
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(hits as f64 / total as f64)
}

fn texts_of(elements: &[DiagnosisElement]) -> Vec<&str> {
    elements.iter().map(|e| e.text.as_str()).collect()
}

fn check_vocab(config: &EncoderConfig, vocab: &Vocabulary) -> Result<()> {
    if config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary size {} does not match the vocabulary's {}",
            config.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

/// Pretrains a freshly initialized model (seeded by `cfg.seed`).
pub fn pretrain(
    split: &CorpusSplit,
    vocab: &Vocabulary,
    model_config: EncoderConfig,
    cfg: &PretrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    let init = ModelWeights::init(model_config, seed::derive(cfg.seed, &[0x1417]))?;
    pretrain_from(init, split, vocab, cfg, checkpoint_dir)
}

/// Masked-LM training loop: each pass over the train split is shuffled under
/// the seed, each step corrupts a batch, runs forward with dropout, and takes
/// one Adam step. Validation accuracy (dropout off) is logged every
/// `eval_every` steps and after the final step.
pub fn pretrain_from(
    mut weights: ModelWeights<f32>,
    split: &CorpusSplit,
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    check_vocab(&weights.config, vocab)?;
    let max_len = weights.config.max_seq_len;
    let (train, _) = encode_maskable(&texts_of(&split.train), vocab, max_len);
    if train.is_empty() && cfg.total_steps > 0 {
        return Err(Error::EmptyCorpus);
    }
    let (val, _) = encode_maskable(&texts_of(&split.validation), vocab, max_len);
    let vocab_hash = vocab.content_hash();
    let mut state = AdamState::new(&weights);
    let mut log = Vec::with_capacity(cfg.total_steps);
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut pass = 0u64;

    for step in 1..=cfg.total_steps {
        if cursor >= order.len() {
            order = (0..train.len()).collect();
            order.shuffle(&mut seed::rng(cfg.seed, &[1, pass]));
            pass += 1;
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let rows: Vec<Vec<u32>> = order[cursor..end].iter().map(|&i| train[i].clone()).collect();
        cursor = end;

        let diverged = |checkpoints: &[PathBuf]| Error::Diverged {
            step,
            checkpoint: checkpoints
                .last()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
        };
        let masked = corrupt(
            &Batch::from_rows(&rows),
            vocab.len(),
            cfg.mask_rate,
            seed::derive(cfg.seed, &[2, step as u64]),
        )?;
        let (logits, trace) = weights.forward(
            &masked.batch(),
            &Head::MlmAt(masked.flat_positions()),
            Some(seed::derive(cfg.seed, &[3, step as u64])),
        )?;
        let loss = mlm_loss_rows(&logits, &masked.targets())?;
        if !loss.value.is_finite() {
            return Err(diverged(&checkpoints));
        }
        let grads = weights.backward(&trace, &loss.dlogits)?;
        match adam_step(&mut weights, &grads, &mut state, cfg.lr, &cfg.adam) {
            Err(Error::GradientOverflow(_)) => return Err(diverged(&checkpoints)),
            r => r?,
        }
        if !weights.is_finite() {
            return Err(diverged(&checkpoints));
        }

        let eval_now = (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.total_steps;
        let val_metric = if eval_now && !val.is_empty() {
            let acc = masked_accuracy(&weights, &val, cfg.mask_rate, seed::derive(cfg.seed, &[4]), 64)?;
            log::info!(
                "step {step}: train loss {:.4}, validation masked accuracy {acc:.4}",
                loss.value
            );
            Some(acc)
        } else {
            None
        };
        log.push(LogRow {
            step,
            train_loss: loss.value,
            val_metric,
        });
        if let Some(dir) = checkpoint_dir.filter(|_| cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            let path = dir.join(format!("step-{step:08}.plmc"));
            let header = CheckpointHeader {
                config: weights.config,
                vocab_hash: vocab_hash.clone(),
                step: step as u64,
                labels: Vec::new(),
            };
            checkpoint::save(&path, &weights, &header)?;
            checkpoints.push(path);
        }
    }
    Ok(PretrainOutcome {
        weights,
        log,
        checkpoints,
    })
}

/// The six breast cancer severity categories, in head order.
pub fn default_labels() -> Vec<String> {
    [
        "invasive breast cancer",
        "in situ breast cancer",
        "high risk lesion",
        "non-breast cancer",
        "benign",
        "negative",
    ]
    .map(String::from)
    .to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Label names in classification-head column order.
    pub labels: Vec<String>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    /// Epoch evaluations without development improvement before stopping.
    pub patience: usize,
    /// A label is asserted when its probability is at least this value.
    pub decision_threshold: f64,
    pub seed: u64,
    pub adam: AdamParams,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            labels: default_labels(),
            epochs: 6,
            batch_size: 32,
            lr: 2e-5,
            dropout: 0.2,
            patience: 10,
            decision_threshold: 0.5,
            seed: 42,
            adam: AdamParams::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Config("label list is empty".into()));
        }
        let unique: HashSet<&String> = self.labels.iter().collect();
        if unique.len() != self.labels.len() {
            return Err(Error::Config("label list has duplicates".into()));
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(Error::Config(format!(
                "decision_threshold must be in (0, 1), got {}",
                self.decision_threshold
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(Error::Config("epochs, batch_size and patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One binary target per label: 1 where the element carries that label.
pub fn label_targets(element_labels: Option<&BTreeSet<String>>, labels: &[String]) -> Result<Vec<f64>> {
    if let Some(set) = element_labels {
        if let Some(unknown) = set.iter().find(|l| !labels.contains(l)) {
            return Err(Error::UnknownLabel(unknown.clone()));
        }
    }
    Ok(labels
        .iter()
        .map(|l| element_labels.is_some_and(|s| s.contains(l)) as u8 as f64)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer step count at the end of the epoch.
    pub step: usize,
    pub train_loss: f64,
    pub dev_micro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Weights of the best development epoch.
    pub weights: ModelWeights<f32>,
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
    /// Per-step rows; `val_metric` carries development micro-F1 at epoch ends.
    pub log: Vec<LogRow>,
    pub stopped_early: bool,
}

/// Fine-tunes a shared encoder with one sigmoid output per label on the
/// summed binary cross-entropy. When `dev` is `None`, 10% of `train` is held
/// out as the development split. Returns the weights of the epoch with the
/// highest development micro-F1 (earliest on ties).
pub fn finetune(
    pretrained: &ModelWeights<f32>,
    train: &[DiagnosisElement],
    dev: Option<&[DiagnosisElement]>,
    vocab: &Vocabulary,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    check_vocab(&pretrained.config, vocab)?;
    for e in train.iter().chain(dev.unwrap_or(&[])) {
        label_targets(e.labels.as_ref(), &cfg.labels)?;
    }
    let carved;
    let (train, dev) = match dev {
        Some(d) => (train, d),
        None => {
            carved = make_split(train, (0.9, 0.1, 0.0), cfg.seed)?;
            (&carved.train[..], &carved.validation[..])
        }
    };
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if dev.is_empty() {
        return Err(Error::Config("development split is empty".into()));
    }

    let n_labels = cfg.labels.len();
    let mut weights = pretrained
        .clone()
        .with_cls_head(n_labels, seed::derive(cfg.seed, &[0xc15]));
    weights.config.dropout_rate = cfg.dropout;
    let max_len = weights.config.max_seq_len;
    let rows: Vec<Vec<u32>> = train
        .par_iter()
        .map(|e| encode_unpadded(&e.text, vocab, max_len))
        .collect();
    let targets: Vec<Vec<f64>> = train
        .iter()
        .map(|e| label_targets(e.labels.as_ref(), &cfg.labels))
        .collect::<Result<_>>()?;
    let dev_texts = texts_of(dev);
    let dev_truth: Vec<Vec<bool>> = dev
        .iter()
        .map(|e| label_targets(e.labels.as_ref(), &cfg.labels).map(|t| t.iter().map(|&x| x > 0.5).collect()))
        .collect::<Result<_>>()?;

    let mut state = AdamState::new(&weights);
    let mut best: Option<(f64, usize, ModelWeights<f32>)> = None;
    let mut since_best = 0usize;
    let mut epochs = Vec::new();
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[5, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let batch_rows: Vec<Vec<u32>> = idx.iter().map(|&i| rows[i].clone()).collect();
            let batch_targets: Vec<f64> = idx.iter().flat_map(|&i| targets[i].iter().copied()).collect();
            let (logits, trace) = weights.forward(
                &Batch::from_rows(&batch_rows),
                &Head::Cls,
                Some(seed::derive(cfg.seed, &[6, step as u64])),
            )?;
            let loss = cls_loss(&logits, &batch_targets)?;
            let diverged = Error::Diverged {
                step,
                checkpoint: "none".into(),
            };
            if !loss.value.is_finite() {
                return Err(diverged);
            }
            let grads = weights.backward(&trace, &loss.dlogits)?;
            match adam_step(&mut weights, &grads, &mut state, cfg.lr, &cfg.adam) {
                Err(Error::GradientOverflow(_)) => return Err(diverged),
                r => r?,
            }
            loss_sum += loss.value;
            n_batches += 1;
            log.push(LogRow {
                step,
                train_loss: loss.value,
                val_metric: None,
            });
        }
        let probs = predict_probabilities(&weights, &dev_texts, vocab)?;
        let mut counts = LabelCounts::new(n_labels);
        for (p, t) in probs.iter().zip(&dev_truth) {
            let pred: Vec<bool> = p.iter().map(|&x| x >= cfg.decision_threshold).collect();
            counts.add(&pred, t);
        }
        let f1 = counts.micro().2;
        if let Some(last) = log.last_mut() {
            last.val_metric = Some(f1);
        }
        epochs.push(EpochLog {
            epoch,
            step,
            train_loss: loss_sum / n_batches as f64,
            dev_micro_f1: f1,
        });
        log::info!(
            "epoch {epoch}: train loss {:.4}, development micro-F1 {f1:.4}",
            loss_sum / n_batches as f64
        );
        if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            best = Some((f1, epoch, weights.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    let (_, best_epoch, mut weights) = best.expect("at least one epoch ran");
    weights.config.dropout_rate = pretrained.config.dropout_rate;
    Ok(FinetuneOutcome {
        weights,
        best_epoch,
        epochs,
        log,
        stopped_early,
    })
}

const PREDICT_CHUNK: usize = 64;

/// Per-label sigmoid probabilities for each text, dropout off.
pub fn predict_probabilities(weights: &ModelWeights<f32>, texts: &[&str], vocab: &Vocabulary) -> Result<Vec<Vec<f64>>> {
    if weights.cls.is_none() {
        return Err(Error::MissingHead);
    }
    check_vocab(&weights.config, vocab)?;
    let n = weights.config.n_labels;
    let mut out = Vec::with_capacity(texts.len());
    for part in texts.chunks(PREDICT_CHUNK) {
        let rows: Vec<Vec<u32>> = part
            .iter()
            .map(|t| encode_unpadded(t, vocab, weights.config.max_seq_len))
            .collect();
        let (logits, _) = weights.forward(&Batch::from_rows(&rows), &Head::Cls, None)?;
        out.extend(
            logits
                .data
                .chunks(n)
                .map(|z| z.iter().map(|&z| sigmoid(z as f64)).collect()),
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPrediction {
    pub labels: BTreeSet<String>,
    /// Probability of each configured label, in head order.
    pub probabilities: Vec<f64>,
}

/// Asserts each label whose probability is at least `threshold`.
pub fn predict_labels(
    weights: &ModelWeights<f32>,
    labels: &[String],
    texts: &[&str],
    vocab: &Vocabulary,
    threshold: f64,
) -> Result<Vec<LabelPrediction>> {
    if weights.cls.is_some() && labels.len() != weights.config.n_labels {
        return Err(Error::Config(format!(
            "{} label names for a head of width {}",
            labels.len(),
            weights.config.n_labels
        )));
    }
    Ok(predict_probabilities(weights, texts, vocab)?
        .into_iter()
        .map(|probabilities| LabelPrediction {
            labels: labels
                .iter()
                .zip(&probabilities)
                .filter(|(_, &p)| p >= threshold)
                .map(|(l, _)| l.clone())
                .collect(),
            probabilities,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wordpiece::{CLS_ID, PAD_ID, SEP_ID};

    fn row(n_real: usize, pad: usize) -> (Vec<u32>, Vec<u8>) {
        let mut ids = vec![CLS_ID];
        ids.extend((0..n_real as u32).map(|i| 5 + i % 20));
        ids.push(SEP_ID);
        let mut mask = vec![1u8; ids.len()];
        ids.extend(std::iter::repeat_n(PAD_ID, pad));
        mask.extend(std::iter::repeat_n(0, pad));
        (ids, mask)
    }

    fn batch_of(rows: &[(Vec<u32>, Vec<u8>)]) -> Batch {
        let seq = rows[0].0.len();
        Batch::new(
            rows.iter().flat_map(|r| r.0.clone()).collect(),
            rows.iter().flat_map(|r| r.1.clone()).collect(),
            rows.len(),
            seq,
        )
        .unwrap()
    }

    #[test]
    fn full_rate_selects_every_eligible_position() {
        let b = batch_of(&[row(10, 3)]);
        let m = corrupt(&b, 30, 1.0, 1).unwrap();
        assert_eq!(m.mask_positions[0], (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn specials_and_padding_are_never_selected() {
        let b = batch_of(&[row(4, 6), row(9, 1)]);
        for seed in 0..200 {
            let m = corrupt(&b, 30, 0.5, seed).unwrap();
            for (bi, ps) in m.mask_positions.iter().enumerate() {
                assert!(!ps.is_empty());
                for &s in ps {
                    let i = bi * b.seq_len + s;
                    assert!(m.original_ids[i] >= N_SPECIAL && m.attention_mask[i] == 1);
                }
            }
            let selected: HashSet<usize> = m.flat_positions().into_iter().collect();
            for i in 0..b.ids.len() {
                if !selected.contains(&i) {
                    assert_eq!(m.input_ids[i], m.original_ids[i]);
                }
            }
            assert_eq!(m.original_ids, b.ids);
        }
    }

    #[test]
    fn forces_one_mask_on_short_rows() {
        let b = batch_of(&[row(1, 0)]);
        for seed in 0..50 {
            let m = corrupt(&b, 30, 0.01, seed).unwrap();
            assert_eq!(m.mask_positions[0], vec![1]);
        }
    }

    #[test]
    fn no_eligible_position_is_an_error() {
        let b = batch_of(&[row(0, 2)]);
        assert!(matches!(corrupt(&b, 30, 0.15, 0), Err(Error::EmptySequence)));
        let unk = Batch::new(vec![CLS_ID, 1, SEP_ID], vec![1, 1, 1], 1, 3).unwrap();
        assert!(matches!(corrupt(&unk, 30, 0.15, 0), Err(Error::EmptySequence)));
    }

    #[test]
    fn corruption_is_deterministic_under_seed() {
        let b = batch_of(&[row(30, 0), row(30, 0)]);
        assert_eq!(corrupt(&b, 100, 0.3, 9).unwrap(), corrupt(&b, 100, 0.3, 9).unwrap());
        assert_ne!(corrupt(&b, 100, 0.3, 9).unwrap(), corrupt(&b, 100, 0.3, 10).unwrap());
    }

    #[test]
    fn selection_rate_and_replacement_mix() {
        // 1000 rows x 1000 eligible positions.
        let b = batch_of(&vec![row(1000, 0); 1000]);
        let m = corrupt(&b, 10_000, 0.15, 2024).unwrap();
        let n = m.n_masked() as f64;
        let rate = n / 1e6;
        assert!((rate - 0.15).abs() < 0.002, "selected fraction {rate}");
        let (mut masked, mut same) = (0usize, 0usize);
        for i in m.flat_positions() {
            if m.input_ids[i] == MASK_ID {
                masked += 1;
            } else if m.input_ids[i] == m.original_ids[i] {
                same += 1;
            }
        }
        let (fm, fs) = (masked as f64 / n, same as f64 / n);
        let fr = 1.0 - fm - fs;
        assert!((fm - 0.8).abs() < 0.01, "mask fraction {fm}");
        // Random replacements occasionally draw the original token back.
        assert!((fs - 0.1).abs() < 0.01, "unchanged fraction {fs}");
        assert!((fr - 0.1).abs() < 0.01, "random fraction {fr}");
        assert!(m.input_ids.iter().all(|&id| id != 0 && id < 10_000));
    }

    #[test]
    fn random_replacements_are_regular_tokens() {
        let b = batch_of(&vec![row(50, 0); 50]);
        let m = corrupt(&b, 8, 1.0, 3).unwrap();
        for i in m.flat_positions() {
            assert!(m.input_ids[i] == MASK_ID || m.input_ids[i] >= N_SPECIAL);
        }
    }

    #[test]
    fn multi_label_targets() {
        let labels = default_labels();
        let set: BTreeSet<String> = ["benign", "negative"].map(String::from).into();
        let t = label_targets(Some(&set), &labels).unwrap();
        assert_eq!(t.iter().sum::<f64>(), 2.0);
        assert_eq!(t, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(label_targets(None, &labels).unwrap(), vec![0.0; 6]);
        let bad: BTreeSet<String> = ["borderline lesion".to_string()].into();
        assert!(matches!(
            label_targets(Some(&bad), &labels),
            Err(Error::UnknownLabel(_))
        ));
    }

    #[test]
    fn finetune_config_validation() {
        assert!(FinetuneConfig::default().validate().is_ok());
        let dup = FinetuneConfig {
            labels: vec!["a".into(), "a".into()],
            ..Default::default()
        };
        assert!(dup.validate().is_err());
        let thr = FinetuneConfig {
            decision_threshold: 1.0,
            ..Default::default()
        };
        assert!(thr.validate().is_err());
        assert!(PretrainConfig {
            mask_rate: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn log_csv_leaves_missing_metrics_blank() {
        let rows = [
            LogRow {
                step: 1,
                train_loss: 2.5,
                val_metric: None,
            },
            LogRow {
                step: 2,
                train_loss: 2.0,
                val_metric: Some(0.5),
            },
        ];
        let text = String::from_utf8(log_csv(&rows).unwrap()).unwrap();
        assert_eq!(
            text,
            "step,train_loss,val_metric\n1,2.50000000,\n2,2.00000000,0.50000000\n"
        );
    }
}
