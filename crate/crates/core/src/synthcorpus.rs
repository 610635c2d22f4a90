//! Templated synthetic report corpora with keyword-derived labels.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use indexmap::IndexMap;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize, PathologyReport, DIAGNOSIS};
use crate::error::{Error, Result};
use crate::seed;

static SLOT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([A-Za-z0-9_]+)\}").unwrap());

/// A slot fill, written in JSON either as `"text"` (weight 1) or `["text", weight]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Fill {
    Plain(String),
    Weighted(String, f64),
}

impl Fill {
    pub fn text(&self) -> &str {
        match self {
            Fill::Plain(t) | Fill::Weighted(t, _) => t,
        }
    }

    pub fn weight(&self) -> f64 {
        match self {
            Fill::Plain(_) => 1.0,
            Fill::Weighted(_, w) => *w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    /// Diagnosis templates with `{slot}` placeholders; each occurrence is filled independently.
    pub templates: Vec<String>,
    pub slot_fills: BTreeMap<String, Vec<Fill>>,
    /// Label to trigger phrases; a label applies when any phrase occurs as whole words.
    pub label_rules: BTreeMap<String, Vec<String>>,
    /// Optional HISTORY section lines, one sampled uniformly per report.
    #[serde(default)]
    pub history: Vec<String>,
    pub n_reports: usize,
    pub seed: u64,
}

const BUNDLED: &str = include_str!("../data/bundled_spec.json");

impl TemplateSpec {
    /// 20 breast pathology templates over a lexicon of about 200 words, with
    /// rules for the six severity labels.
    pub fn bundled() -> Self {
        serde_json::from_str(BUNDLED).expect("bundled spec is valid JSON")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: TemplateSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config("spec has no templates".into()));
        }
        for t in &self.templates {
            for cap in SLOT.captures_iter(t) {
                let name = &cap[1];
                match self.slot_fills.get(name) {
                    Some(fills) if !fills.is_empty() => {}
                    _ => return Err(Error::Config(format!("slot {{{name}}} has no fills"))),
                }
            }
        }
        for (slot, fills) in &self.slot_fills {
            if let Some(f) = fills.iter().find(|f| !(f.weight() > 0.0 && f.weight().is_finite())) {
                return Err(Error::Config(format!(
                    "fill {:?} of slot {slot} has non-positive weight {}",
                    f.text(),
                    f.weight()
                )));
            }
        }
        Ok(())
    }

    /// Same templates with every slot occurrence pinned to one fill, so each
    /// template yields a single text and every token is a function of its
    /// template context. Fills are drawn under the spec seed, redrawing until
    /// each template's word count differs from all earlier ones (when
    /// possible), so the template is recoverable from length alone.
    pub fn deterministic(&self) -> Self {
        const ATTEMPTS: u64 = 500;
        // Candidate fill draws per template with their word counts.
        let candidates: Vec<Vec<(Vec<String>, usize)>> = self
            .templates
            .iter()
            .enumerate()
            .map(|(ti, t)| {
                (0..ATTEMPTS)
                    .map(|attempt| {
                        let picks: Vec<String> = SLOT
                            .captures_iter(t)
                            .enumerate()
                            .map(|(occ, cap)| {
                                let fills = &self.slot_fills[&cap[1]];
                                let r = seed::derive(self.seed, &[ti as u64, occ as u64, attempt]);
                                fills[r as usize % fills.len()].text().to_string()
                            })
                            .collect();
                        let mut it = picks.iter();
                        let text = SLOT.replace_all(t, |_: &regex::Captures| it.next().unwrap().clone());
                        let n = normalize(&text).split_whitespace().count();
                        (picks, n)
                    })
                    .collect()
            })
            .collect();
        // Match templates to distinct lengths (augmenting paths); unmatched
        // templates keep their first draw.
        let options: Vec<Vec<usize>> = candidates
            .iter()
            .map(|c| c.iter().map(|x| x.1).collect::<BTreeSet<_>>().into_iter().collect())
            .collect();
        let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
        fn augment(
            ti: usize,
            options: &[Vec<usize>],
            owner: &mut BTreeMap<usize, usize>,
            seen: &mut BTreeSet<usize>,
        ) -> bool {
            for &n in &options[ti] {
                if seen.insert(n) {
                    let free = match owner.get(&n) {
                        None => true,
                        Some(&other) => augment(other, options, owner, seen),
                    };
                    if free {
                        owner.insert(n, ti);
                        return true;
                    }
                }
            }
            false
        }
        for ti in 0..self.templates.len() {
            augment(ti, &options, &mut owner, &mut BTreeSet::new());
        }
        let mut chosen = vec![0usize; self.templates.len()];
        for (n, ti) in owner {
            chosen[ti] = candidates[ti].iter().position(|c| c.1 == n).unwrap();
        }
        let mut pinned: BTreeMap<String, Vec<Fill>> = BTreeMap::new();
        let templates = self
            .templates
            .iter()
            .enumerate()
            .map(|(ti, t)| {
                let picks = &candidates[ti][chosen[ti]].0;
                let mut occ = 0usize;
                SLOT.replace_all(t, |_: &regex::Captures| {
                    let name = format!("t{ti}_{occ}");
                    pinned.insert(name.clone(), vec![Fill::Plain(picks[occ].clone())]);
                    occ += 1;
                    format!("{{{name}}}")
                })
                .into_owned()
            })
            .collect();
        TemplateSpec {
            templates,
            slot_fills: pinned,
            ..self.clone()
        }
    }

    /// Normalized words that templates and fills can produce.
    pub fn lexicon(&self) -> BTreeSet<String> {
        let mut words = BTreeSet::new();
        let mut add = |text: &str| words.extend(normalize(text).split_whitespace().map(String::from));
        let used: BTreeSet<&str> = self
            .templates
            .iter()
            .flat_map(|t| SLOT.captures_iter(t).map(|c| c.get(1).unwrap().as_str()))
            .collect();
        for t in &self.templates {
            add(&SLOT.replace_all(t, " "));
        }
        for slot in used {
            for f in &self.slot_fills[slot] {
                add(f.text());
            }
        }
        words
    }
}

/// Labels whose trigger phrases occur in `text` as whole words.
pub fn apply_label_rules(text: &str, rules: &BTreeMap<String, Vec<String>>) -> BTreeSet<String> {
    let padded = format!(" {} ", normalize(text));
    rules
        .iter()
        .filter(|(_, triggers)| triggers.iter().any(|k| padded.contains(&format!(" {} ", normalize(k)))))
        .map(|(label, _)| label.clone())
        .collect()
}

fn sample_report(spec: &TemplateSpec, weights: &BTreeMap<&str, WeightedIndex<f64>>, i: usize) -> PathologyReport {
    let mut rng = seed::rng(spec.seed, &[i as u64]);
    let template = &spec.templates[rng.random_range(0..spec.templates.len())];
    let diagnosis = SLOT
        .replace_all(template, |cap: &regex::Captures| {
            let slot = &cap[1];
            spec.slot_fills[slot][weights[slot].sample(&mut rng)].text().to_string()
        })
        .into_owned();
    let mut sections = IndexMap::new();
    if !spec.history.is_empty() {
        let h = &spec.history[rng.random_range(0..spec.history.len())];
        sections.insert("HISTORY".to_string(), h.clone());
    }
    let labels = apply_label_rules(&diagnosis, &spec.label_rules);
    sections.insert(DIAGNOSIS.to_string(), diagnosis);
    PathologyReport {
        report_id: format!("synth-{i:07}"),
        patient_id: format!("patient-{:07}", i / 2),
        sections,
        labels: Some(labels),
        report_year: Some(2010 + rng.random_range(0..12)),
    }
}

/// Generates `spec.n_reports` reports. Report `i` depends only on the spec
/// and `i`, so output is identical for any thread count.
pub fn generate(spec: &TemplateSpec) -> Result<Vec<PathologyReport>> {
    spec.validate()?;
    let weights = spec
        .slot_fills
        .iter()
        .map(|(slot, fills)| {
            let w = WeightedIndex::new(fills.iter().map(Fill::weight))
                .map_err(|e| Error::Config(format!("slot {slot}: {e}")))?;
            Ok((slot.as_str(), w))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok((0..spec.n_reports)
        .into_par_iter()
        .map(|i| sample_report(spec, &weights, i))
        .collect())
}
