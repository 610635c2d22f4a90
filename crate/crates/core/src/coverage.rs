//! Full-word vocabulary coverage, overall and per class.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::DiagnosisElement;
use crate::wordpiece::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCoverage {
    pub covered_words: usize,
    pub total_words: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassCoverage {
    /// Unique class words present in the vocabulary.
    pub n_present: usize,
    /// Unique class words.
    pub n_total: usize,
    pub ratio: f64,
    /// Number of elements carrying the class.
    pub support: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub per_threshold: BTreeMap<u64, ThresholdCoverage>,
    pub per_class: BTreeMap<String, ClassCoverage>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// For each frequency threshold, the share of unique corpus words at or above
/// it that exist as a single word-initial vocabulary token.
pub fn word_coverage<I, S>(corpus: I, vocab: &Vocabulary, thresholds: &[u64]) -> BTreeMap<u64, ThresholdCoverage>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut freq: HashMap<String, u64> = HashMap::new();
    for text in corpus {
        for w in text.as_ref().split_whitespace() {
            *freq.entry(w.to_string()).or_default() += 1;
        }
    }
    let words: Vec<(u64, bool)> = freq.iter().map(|(w, &c)| (c, vocab.contains_word(w))).collect();
    thresholds
        .iter()
        .map(|&t| {
            let (covered, total) = words
                .iter()
                .filter(|(c, _)| *c >= t)
                .fold((0, 0), |(cv, tot), (_, present)| (cv + *present as usize, tot + 1));
            (
                t,
                ThresholdCoverage {
                    covered_words: covered,
                    total_words: total,
                    fraction: ratio(covered, total),
                },
            )
        })
        .collect()
}

/// Coverage ratio N(present)/N(unique) of each class's pooled unique words.
/// Elements with several labels count toward each of them; unlabeled
/// elements are ignored.
pub fn class_coverage(elements: &[DiagnosisElement], vocab: &Vocabulary) -> BTreeMap<String, ClassCoverage> {
    let mut pools: BTreeMap<&str, (BTreeSet<&str>, usize)> = BTreeMap::new();
    for e in elements {
        for label in e.labels.iter().flatten() {
            let entry = pools.entry(label.as_str()).or_default();
            entry.0.extend(e.text.split_whitespace());
            entry.1 += 1;
        }
    }
    pools
        .into_iter()
        .map(|(label, (words, support))| {
            let present = words.iter().filter(|w| vocab.contains_word(w)).count();
            (
                label.to_string(),
                ClassCoverage {
                    n_present: present,
                    n_total: words.len(),
                    ratio: ratio(present, words.len()),
                    support,
                },
            )
        })
        .collect()
}

impl CoverageReport {
    pub fn threshold_csv(&self) -> crate::Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["threshold", "covered", "total", "fraction"])?;
        for (t, c) in &self.per_threshold {
            w.write_record([
                t.to_string(),
                c.covered_words.to_string(),
                c.total_words.to_string(),
                format!("{:.6}", c.fraction),
            ])?;
        }
        Ok(w.into_inner().expect("in-memory csv"))
    }

    pub fn class_csv(&self) -> crate::Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["class", "np", "nn", "ratio", "support"])?;
        for (label, c) in &self.per_class {
            w.write_record([
                label.clone(),
                c.n_present.to_string(),
                c.n_total.to_string(),
                format!("{:.6}", c.ratio),
                c.support.to_string(),
            ])?;
        }
        Ok(w.into_inner().expect("in-memory csv"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wordpiece::SPECIAL_TOKENS;
    use proptest::prelude::*;

    fn vocab(extra: &[&str]) -> Vocabulary {
        Vocabulary::from_tokens(SPECIAL_TOKENS.iter().chain(extra).map(|s| s.to_string()).collect()).unwrap()
    }

    fn labeled(texts: &[&str], label: &str) -> Vec<DiagnosisElement> {
        texts
            .iter()
            .map(|t| DiagnosisElement::new("r", "p", *t, Some([label.to_string()].into())))
            .collect()
    }

    #[test]
    fn word_coverage_examples() {
        let corpus = ["a b", "a"];
        let full = word_coverage(corpus, &vocab(&["a", "b"]), &[1]);
        assert_eq!(
            full[&1],
            ThresholdCoverage {
                covered_words: 2,
                total_words: 2,
                fraction: 1.0
            }
        );
        let only_a = word_coverage(corpus, &vocab(&["a"]), &[2]);
        assert_eq!(
            only_a[&2],
            ThresholdCoverage {
                covered_words: 1,
                total_words: 1,
                fraction: 1.0
            }
        );
        let none = word_coverage(corpus, &vocab(&["a"]), &[5]);
        assert_eq!(none[&5].fraction, 0.0);
    }

    #[test]
    fn continuation_and_special_tokens_do_not_cover() {
        let cov = word_coverage(["##a [MASK] a"], &vocab(&["##a", "a"]), &[1]);
        assert_eq!(cov[&1].covered_words, 1);
        assert_eq!(cov[&1].total_words, 3);
    }

    #[test]
    fn class_coverage_examples() {
        let es = labeled(&["a b", "b c"], "L");
        assert_eq!(class_coverage(&es, &vocab(&["a", "b", "c"]))["L"].ratio, 1.0);
        let c = class_coverage(&es, &vocab(&["a", "b"]))["L"];
        assert_eq!((c.n_present, c.n_total, c.support), (2, 3, 2));
        assert!((c.ratio - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn multi_label_elements_count_for_each_class() {
        let e = DiagnosisElement::new("r", "p", "x y", Some(["A".to_string(), "B".to_string()].into()));
        let cov = class_coverage(&[e], &vocab(&["x"]));
        assert_eq!(cov.len(), 2);
        assert_eq!(cov["A"], cov["B"]);
    }

    #[test]
    fn csv_exports() {
        let report = CoverageReport {
            per_threshold: word_coverage(["a b"], &vocab(&["a"]), &[1]),
            per_class: class_coverage(&labeled(&["a"], "L"), &vocab(&["a"])),
        };
        let t = String::from_utf8(report.threshold_csv().unwrap()).unwrap();
        assert_eq!(t, "threshold,covered,total,fraction\n1,1,2,0.500000\n");
        let c = String::from_utf8(report.class_csv().unwrap()).unwrap();
        assert_eq!(c, "class,np,nn,ratio,support\nL,1,1,1.000000,1\n");
    }

    proptest! {
        #[test]
        fn fraction_bounds_and_vocab_monotonicity(
            texts in proptest::collection::vec("[a-e]{1,3}( [a-e]{1,3}){0,5}", 1..20),
            keep in proptest::collection::vec(any::<bool>(), 12),
        ) {
            let words: BTreeSet<String> = texts.iter().flat_map(|t| t.split_whitespace().map(str::to_string)).collect();
            let words: Vec<String> = words.into_iter().collect();
            let small: Vec<&str> = words.iter().zip(keep.iter().cycle()).filter(|(_, k)| **k).map(|(w, _)| w.as_str()).collect();
            let big: Vec<&str> = words.iter().map(String::as_str).collect();
            let (vs, vb) = (vocab(&small), vocab(&big));
            let ts = [1, 2, 3];
            let cs = word_coverage(&texts, &vs, &ts);
            let cb = word_coverage(&texts, &vb, &ts);
            for t in ts {
                prop_assert!(cs[&t].covered_words <= cs[&t].total_words);
                prop_assert!(cs[&t].fraction <= cb[&t].fraction);
            }
            prop_assert_eq!(cb[&1].total_words, words.len());
            prop_assert_eq!(cb[&1].fraction, 1.0);
        }
    }
}
