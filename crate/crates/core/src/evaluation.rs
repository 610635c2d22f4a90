//! Masked-prediction accuracy and multi-label classification metrics.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::DiagnosisElement;
use crate::encoder::Batch;
use crate::encoder::{Head, ModelWeights};
use crate::error::{Error, Result};
use crate::seed;
use crate::training::{corrupt, MaskedBatch};
use crate::wordpiece::{encode_unpadded, tokenize, Vocabulary, CLS_ID, MASK, MASK_ID, N_SPECIAL, SEP_ID};

/// True when `target` is among the `k` highest logits, ties ranked by
/// ascending id. `k = 1` is argmax accuracy.
pub fn top_k_hit(logits: &[f32], target: u32, k: usize) -> bool {
    let t = target as usize;
    let lt = logits[t];
    let mut ahead = 0usize;
    for (j, &l) in logits.iter().enumerate() {
        if l > lt || (l == lt && j < t) {
            ahead += 1;
            if ahead >= k {
                return false;
            }
        }
    }
    true
}

/// Ids of the `k` highest logits, descending, ties by ascending id.
pub fn top_k(logits: &[f32], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    let cmp = |a: &usize, b: &usize| logits[*b].total_cmp(&logits[*a]).then(a.cmp(b));
    let k = k.min(ids.len());
    if k < ids.len() {
        ids.select_nth_unstable_by(k, cmp);
        ids.truncate(k);
    }
    ids.sort_by(cmp);
    ids
}

/// Anything that can produce masked-LM logits for a corrupted batch.
pub trait MlmScorer: Sync {
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    /// Row-major `[n_masked, vocab_size]` logits at `masked.flat_positions()`.
    fn score(&self, masked: &MaskedBatch) -> Result<Vec<f32>>;
}

impl MlmScorer for ModelWeights<f32> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn score(&self, masked: &MaskedBatch) -> Result<Vec<f32>> {
        let (logits, _) = self.forward(&masked.batch(), &Head::MlmAt(masked.flat_positions()), None)?;
        Ok(logits.data)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMlm {
    pub accuracy: f64,
    pub top_k_accuracy: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmRateRow {
    pub mask_rate: f64,
    pub accuracy: f64,
    pub top_k_accuracy: f64,
    pub n_masked: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_class: BTreeMap<String, ClassMlm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmEvalReport {
    pub k: usize,
    pub seed: u64,
    pub n_texts: usize,
    /// Texts without any maskable token.
    pub n_skipped: usize,
    pub rows: Vec<MlmRateRow>,
}

#[derive(Default, Clone, Copy)]
struct Hits {
    top1: usize,
    topk: usize,
    n: usize,
}

impl Hits {
    fn add(&mut self, o: Hits) {
        self.top1 += o.top1;
        self.topk += o.topk;
        self.n += o.n;
    }

    fn class(&self) -> ClassMlm {
        ClassMlm {
            accuracy: self.top1 as f64 / self.n as f64,
            top_k_accuracy: self.topk as f64 / self.n as f64,
            support: self.n,
        }
    }
}

const EVAL_CHUNK: usize = 64;

/// Masks every text at each rate (deterministic under `seed`, independent of
/// `k`), scores without dropout, and pools top-1 and top-`k` hits over all
/// masked positions. Positions in labeled texts also count toward each of
/// the text's labels.
pub fn eval_mlm<S: MlmScorer>(
    scorer: &S,
    texts: &[DiagnosisElement],
    vocab: &Vocabulary,
    mask_rates: &[f64],
    k: usize,
    seed: u64,
) -> Result<MlmEvalReport> {
    if texts.is_empty() {
        return Err(Error::Invalid("empty text list".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if let Some(r) = mask_rates.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(Error::Config(format!("mask rate must be in (0, 1), got {r}")));
    }
    if scorer.vocab_size() != vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary size {} does not match the vocabulary's {}",
            scorer.vocab_size(),
            vocab.len()
        )));
    }
    let encoded: Vec<(Vec<u32>, &DiagnosisElement)> = texts
        .par_iter()
        .map(|e| (encode_unpadded(&e.text, vocab, scorer.max_seq_len()), e))
        .collect::<Vec<_>>()
        .into_iter()
        .filter(|(ids, _)| ids.iter().any(|&id| id >= N_SPECIAL))
        .collect();
    let n_skipped = texts.len() - encoded.len();
    let v = scorer.vocab_size();

    let mut rows = Vec::with_capacity(mask_rates.len());
    for &rate in mask_rates {
        let chunks: Vec<(Hits, BTreeMap<String, Hits>)> = encoded
            .par_chunks(EVAL_CHUNK)
            .enumerate()
            .map(|(ci, part)| {
                let ids: Vec<Vec<u32>> = part.iter().map(|(r, _)| r.clone()).collect();
                let masked = corrupt(
                    &Batch::from_rows(&ids),
                    v,
                    rate,
                    seed::derive(seed, &[rate.to_bits(), ci as u64]),
                )?;
                let logits = scorer.score(&masked)?;
                let mut total = Hits::default();
                let mut per_class: BTreeMap<String, Hits> = BTreeMap::new();
                let mut row = 0usize;
                for (b, positions) in masked.mask_positions.iter().enumerate() {
                    for &s in positions {
                        let target = masked.original_ids[b * masked.seq_len + s];
                        let l = &logits[row * v..(row + 1) * v];
                        let h = Hits {
                            top1: top_k_hit(l, target, 1) as usize,
                            topk: top_k_hit(l, target, k) as usize,
                            n: 1,
                        };
                        total.add(h);
                        for label in part[b].1.labels.iter().flatten() {
                            per_class.entry(label.clone()).or_default().add(h);
                        }
                        row += 1;
                    }
                }
                Ok((total, per_class))
            })
            .collect::<Result<_>>()?;
        let mut total = Hits::default();
        let mut per_class: BTreeMap<String, Hits> = BTreeMap::new();
        for (t, pc) in chunks {
            total.add(t);
            for (label, h) in pc {
                per_class.entry(label).or_default().add(h);
            }
        }
        if total.n == 0 {
            return Err(Error::Invalid("no maskable token in any text".into()));
        }
        let c = total.class();
        rows.push(MlmRateRow {
            mask_rate: rate,
            accuracy: c.accuracy,
            top_k_accuracy: c.top_k_accuracy,
            n_masked: total.n,
            per_class: per_class.into_iter().map(|(l, h)| (l, h.class())).collect(),
        });
    }
    Ok(MlmEvalReport {
        k,
        seed,
        n_texts: texts.len(),
        n_skipped,
        rows,
    })
}

impl MlmEvalReport {
    /// One row per mask rate.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["mask_rate", "accuracy", &format!("top{}_accuracy", self.k), "n_masked"])?;
        for r in &self.rows {
            w.write_record([
                format!("{:.2}", r.mask_rate),
                format!("{:.6}", r.accuracy),
                format!("{:.6}", r.top_k_accuracy),
                r.n_masked.to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Invalid(e.to_string()))
    }

    /// One row per mask rate and class.
    pub fn class_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "mask_rate",
            "class",
            "accuracy",
            &format!("top{}_accuracy", self.k),
            "support",
        ])?;
        for r in &self.rows {
            for (label, c) in &r.per_class {
                w.write_record([
                    format!("{:.2}", r.mask_rate),
                    label.clone(),
                    format!("{:.6}", c.accuracy),
                    format!("{:.6}", c.top_k_accuracy),
                    c.support.to_string(),
                ])?;
            }
        }
        w.into_inner().map_err(|e| Error::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub sentence: String,
    /// `(token, probability)`, most probable first.
    pub predictions: Vec<(String, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn masked_sentence_ids(
    sentence: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> std::result::Result<(Vec<u32>, usize), String> {
    let parts: Vec<&str> = sentence.split(MASK).collect();
    if parts.len() != 2 {
        return Err(format!("expected exactly one {MASK} marker, found {}", parts.len() - 1));
    }
    let mut ids = vec![CLS_ID];
    ids.extend(tokenize(parts[0], vocab).ids);
    let pos = ids.len();
    ids.push(MASK_ID);
    ids.extend(tokenize(parts[1], vocab).ids);
    ids.push(SEP_ID);
    if ids.len() > max_len {
        return Err(format!("{} tokens exceed the model's {max_len}", ids.len()));
    }
    Ok((ids, pos))
}

/// Top-`top_n` softmax predictions for the single `[MASK]` in each sentence.
/// Sentences with zero or several markers get an error entry instead.
pub fn dump_inferences<S: MlmScorer>(
    scorer: &S,
    sentences: &[&str],
    vocab: &Vocabulary,
    top_n: usize,
) -> Result<Vec<Inference>> {
    sentences
        .par_iter()
        .map(|&sentence| {
            let (ids, pos) = match masked_sentence_ids(sentence, vocab, scorer.max_seq_len()) {
                Ok(x) => x,
                Err(e) => {
                    return Ok(Inference {
                        sentence: sentence.to_string(),
                        predictions: Vec::new(),
                        error: Some(e),
                    })
                }
            };
            let n = ids.len();
            let masked = MaskedBatch {
                input_ids: ids.clone(),
                attention_mask: vec![1; n],
                original_ids: ids,
                mask_positions: vec![vec![pos]],
                corruption_seed: 0,
                batch_size: 1,
                seq_len: n,
            };
            let logits = scorer.score(&masked)?;
            let max = logits.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l as f64));
            let z: f64 = logits.iter().map(|&l| (l as f64 - max).exp()).sum();
            let predictions = top_k(&logits, top_n)
                .into_iter()
                .map(|id| {
                    let token = vocab.token_of(id as u32).unwrap_or("[?]").to_string();
                    (token, (logits[id] as f64 - max).exp() / z)
                })
                .collect();
            Ok(Inference {
                sentence: sentence.to_string(),
                predictions,
                error: None,
            })
        })
        .collect()
}

/// Markdown table with one row per prediction; the sentence appears on its first row.
pub fn inferences_markdown(rows: &[Inference]) -> String {
    let cell = |s: &str| s.replace('|', "\\|");
    let mut out = String::from("| Sentence | Mask Prediction | Confidence |\n|---|---|---|\n");
    for r in rows {
        if let Some(e) = &r.error {
            out.push_str(&format!("| {} | error: {} | |\n", cell(&r.sentence), cell(e)));
            continue;
        }
        for (i, (token, p)) in r.predictions.iter().enumerate() {
            let sentence = if i == 0 { cell(&r.sentence) } else { String::new() };
            out.push_str(&format!("| {sentence} | {} | {p:.4} |\n", cell(token)));
        }
    }
    out
}

/// `(precision, recall, f1)` from confusion counts; each 0 when undefined.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// Per-label confusion counts over binary decision vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelCounts {
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
    pub exact: usize,
    pub n: usize,
}

impl LabelCounts {
    pub fn new(n_labels: usize) -> Self {
        LabelCounts {
            tp: vec![0; n_labels],
            fp: vec![0; n_labels],
            fn_: vec![0; n_labels],
            exact: 0,
            n: 0,
        }
    }

    pub fn add(&mut self, predicted: &[bool], truth: &[bool]) {
        for (l, (&p, &t)) in predicted.iter().zip(truth).enumerate() {
            self.tp[l] += (p && t) as usize;
            self.fp[l] += (p && !t) as usize;
            self.fn_[l] += (!p && t) as usize;
        }
        self.exact += (predicted == truth) as usize;
        self.n += 1;
    }

    pub fn label(&self, l: usize) -> (f64, f64, f64) {
        prf(self.tp[l], self.fp[l], self.fn_[l])
    }

    pub fn micro(&self) -> (f64, f64, f64) {
        prf(self.tp.iter().sum(), self.fp.iter().sum(), self.fn_.iter().sum())
    }

    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.exact as f64 / self.n as f64
        }
    }

    /// Per-label P, R, F1, then micro P, R, F1, then accuracy; `None`
    /// where the metric's denominator is zero.
    fn metric_vector(&self) -> Vec<Option<f64>> {
        let defined = |tp: usize, fp: usize, fn_: usize| {
            let (p, r, f) = prf(tp, fp, fn_);
            [
                (tp + fp > 0).then_some(p),
                (tp + fn_ > 0).then_some(r),
                (tp + fp + fn_ > 0).then_some(f),
            ]
        };
        let mut out = Vec::with_capacity(self.tp.len() * 3 + 4);
        for l in 0..self.tp.len() {
            out.extend(defined(self.tp[l], self.fp[l], self.fn_[l]));
        }
        out.extend(defined(
            self.tp.iter().sum(),
            self.fp.iter().sum(),
            self.fn_.iter().sum(),
        ));
        out.push((self.n > 0).then(|| self.accuracy()));
        out
    }
}

/// A point estimate with its bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub value: f64,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: String,
    pub precision: Interval,
    pub recall: Interval,
    pub f1: Interval,
    /// Samples whose true set contains the label.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClsEvalReport {
    pub labels: Vec<LabelMetrics>,
    pub micro_precision: Interval,
    pub micro_recall: Interval,
    pub micro_f1: Interval,
    pub accuracy: Interval,
    pub accuracy_definition: String,
    pub n_samples: usize,
    pub n_bootstrap: usize,
    pub ci: f64,
    pub seed: u64,
}

fn to_matrix(sets: &[BTreeSet<String>], labels: &[String]) -> Result<Vec<Vec<bool>>> {
    sets.iter()
        .map(|s| {
            if let Some(u) = s.iter().find(|l| !labels.contains(l)) {
                return Err(Error::UnknownLabel(u.clone()));
            }
            Ok(labels.iter().map(|l| s.contains(l)).collect())
        })
        .collect()
}

/// Linear-interpolated percentile of sorted values, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-label and micro precision/recall/F1 plus exact-match accuracy, each
/// with a percentile bootstrap interval over resampled samples. Undefined
/// metrics (zero denominator) score 0 as point estimates; resamples in which
/// a metric is undefined do not contribute to its interval. Intervals are
/// widened when needed so they always contain the point estimate.
pub fn eval_classification(
    predicted: &[BTreeSet<String>],
    truth: &[BTreeSet<String>],
    labels: &[String],
    n_bootstrap: usize,
    ci: f64,
    seed: u64,
) -> Result<ClsEvalReport> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} reference label sets",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    if !(ci > 0.0 && ci < 1.0) {
        return Err(Error::Config(format!("confidence level must be in (0, 1), got {ci}")));
    }
    let pred = to_matrix(predicted, labels)?;
    let gold = to_matrix(truth, labels)?;
    let n = gold.len();
    let counts_of = |idx: &mut dyn Iterator<Item = usize>| {
        let mut c = LabelCounts::new(labels.len());
        for i in idx {
            c.add(&pred[i], &gold[i]);
        }
        c
    };
    let full = counts_of(&mut (0..n));
    let point = full.metric_vector();
    let samples: Vec<Vec<Option<f64>>> = (0..n_bootstrap)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(seed, &[r as u64]);
            counts_of(&mut (0..n).map(|_| rng.random_range(0..n))).metric_vector()
        })
        .collect();
    let alpha = (1.0 - ci) / 2.0;
    let interval = |m: usize| {
        let value = point[m].unwrap_or(0.0);
        let mut v: Vec<f64> = samples.iter().filter_map(|s| s[m]).collect();
        if v.is_empty() {
            return Interval {
                value,
                low: value,
                high: value,
            };
        }
        v.sort_by(f64::total_cmp);
        Interval {
            value,
            low: percentile(&v, alpha).min(value),
            high: percentile(&v, 1.0 - alpha).max(value),
        }
    };
    let n_labels = labels.len();
    let label_metrics = labels
        .iter()
        .enumerate()
        .map(|(l, name)| LabelMetrics {
            label: name.clone(),
            precision: interval(3 * l),
            recall: interval(3 * l + 1),
            f1: interval(3 * l + 2),
            support: full.tp[l] + full.fn_[l],
        })
        .collect();
    Ok(ClsEvalReport {
        labels: label_metrics,
        micro_precision: interval(3 * n_labels),
        micro_recall: interval(3 * n_labels + 1),
        micro_f1: interval(3 * n_labels + 2),
        accuracy: interval(3 * n_labels + 3),
        accuracy_definition: "exact-match subset accuracy".into(),
        n_samples: n,
        n_bootstrap,
        ci,
        seed,
    })
}

impl ClsEvalReport {
    /// One row per label, then `accuracy` (in the F1 columns, support = samples)
    /// and `micro avg`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "label",
            "precision",
            "precision_low",
            "precision_high",
            "recall",
            "recall_low",
            "recall_high",
            "f1",
            "f1_low",
            "f1_high",
            "support",
        ])?;
        let f = |i: &Interval| [i.value, i.low, i.high].map(|x| format!("{x:.6}"));
        let blank = || [String::new(), String::new(), String::new()];
        for m in &self.labels {
            let mut row = vec![m.label.clone()];
            row.extend(f(&m.precision));
            row.extend(f(&m.recall));
            row.extend(f(&m.f1));
            row.push(m.support.to_string());
            w.write_record(&row)?;
        }
        let mut acc = vec!["accuracy".to_string()];
        acc.extend(blank());
        acc.extend(blank());
        acc.extend(f(&self.accuracy));
        acc.push(self.n_samples.to_string());
        w.write_record(&acc)?;
        let mut micro = vec!["micro avg".to_string()];
        micro.extend(f(&self.micro_precision));
        micro.extend(f(&self.micro_recall));
        micro.extend(f(&self.micro_f1));
        micro.push(self.labels.iter().map(|m| m.support).sum::<usize>().to_string());
        w.write_record(&micro)?;
        w.into_inner().map_err(|e| Error::Invalid(e.to_string()))
    }
}
