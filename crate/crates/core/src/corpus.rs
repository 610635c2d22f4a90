//! Report ingestion, DIAGNOSIS-section extraction, normalization, splitting
//! and descriptive statistics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DIAGNOSIS: &str = "DIAGNOSIS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathologyReport {
    pub report_id: String,
    #[serde(default)]
    pub patient_id: String,
    /// Section name (uppercase) to raw text, in input order. Plain-text
    /// reports carry a single section with an empty name.
    pub sections: IndexMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<BTreeSet<String>>,
    #[serde(default, rename = "year", skip_serializing_if = "Option::is_none")]
    pub report_year: Option<i32>,
}

/// One part of a multi-part specimen, normalized.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "ElementRecord", into = "ElementRecord")]
pub struct DiagnosisElement {
    pub source_report_id: String,
    pub patient_id: String,
    pub text: String,
    pub token_count: usize,
    pub labels: Option<BTreeSet<String>>,
    pub year: Option<i32>,
}

#[derive(Serialize, Deserialize)]
struct ElementRecord {
    report_id: String,
    #[serde(default)]
    patient_id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    year: Option<i32>,
}

impl From<ElementRecord> for DiagnosisElement {
    fn from(r: ElementRecord) -> Self {
        let mut e = DiagnosisElement::new(r.report_id, r.patient_id, r.text, r.labels);
        e.year = r.year;
        e
    }
}

impl From<DiagnosisElement> for ElementRecord {
    fn from(e: DiagnosisElement) -> Self {
        ElementRecord {
            report_id: e.source_report_id,
            patient_id: e.patient_id,
            text: e.text,
            labels: e.labels,
            year: e.year,
        }
    }
}

impl DiagnosisElement {
    pub fn new(
        source_report_id: impl Into<String>,
        patient_id: impl Into<String>,
        text: impl Into<String>,
        labels: Option<BTreeSet<String>>,
    ) -> Self {
        let text = text.into();
        DiagnosisElement {
            source_report_id: source_report_id.into(),
            patient_id: patient_id.into(),
            token_count: text.split_whitespace().count(),
            text,
            labels,
            year: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Jsonl,
    PlainDir,
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub reports: Vec<PathologyReport>,
    pub skipped: usize,
}

/// Loads reports from a JSONL file or a directory of plain-text reports.
/// Malformed or duplicate records are skipped with a warning and counted.
pub fn ingest(path: &Path, format: InputFormat) -> Result<Ingested> {
    match format {
        InputFormat::Jsonl => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok(ingest_jsonl_str(&text))
        }
        InputFormat::PlainDir => ingest_dir(path),
    }
}

pub fn ingest_jsonl_str(text: &str) -> Ingested {
    let mut out = Ingested::default();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_report(line) {
            Ok(report) if seen.insert(report.report_id.clone()) => out.reports.push(report),
            Ok(report) => {
                log::warn!("line {}: duplicate report_id {:?}", lineno + 1, report.report_id);
                out.skipped += 1;
            }
            Err(msg) => {
                log::warn!("line {}: skipped: {msg}", lineno + 1);
                out.skipped += 1;
            }
        }
    }
    out
}

fn parse_report(line: &str) -> std::result::Result<PathologyReport, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    match value.get("report_id") {
        Some(serde_json::Value::String(s)) if !s.is_empty() => {}
        _ => return Err("missing report_id".into()),
    }
    let mut report: PathologyReport = serde_json::from_value(value).map_err(|e| e.to_string())?;
    report.sections = report
        .sections
        .into_iter()
        .map(|(k, v)| (k.trim().to_uppercase(), v))
        .collect();
    Ok(report)
}

fn ingest_dir(dir: &Path) -> Result<Ingested> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut out = Ingested::default();
    for path in paths {
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("{}: skipped: {e}", path.display());
                out.skipped += 1;
                continue;
            }
        };
        let report_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut sections = IndexMap::new();
        sections.insert(String::new(), text);
        out.reports.push(PathologyReport {
            report_id,
            patient_id: String::new(),
            sections,
            labels: None,
            report_year: None,
        });
    }
    Ok(out)
}

static HEADER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^([A-Z][A-Z /-]{2,40}):").unwrap());
static PART_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^(?:[a-z]\)|part\s+[a-z0-9]+\s*[:.])\s*").unwrap());

// Header lines without a trailing colon are only recognized for these names;
// otherwise an all-caps diagnosis line would open a new section.
const BARE_HEADERS: &[&str] = &[
    "ADDENDUM",
    "CLINICAL HISTORY",
    "COMMENT",
    "COMMENTS",
    "DIAGNOSIS",
    "FINAL DIAGNOSIS",
    "GROSS DESCRIPTION",
    "HISTORY",
    "MICROSCOPIC DESCRIPTION",
    "MICROSCOPIC EXAMINATION",
    "MICROSCOPY EXAMINATION",
    "SPECIMEN",
];

/// Recognizes a section header line, returning the header name and the text
/// that follows the colon on the same line.
fn match_header(line: &str) -> Option<(String, &str)> {
    let line = line.trim();
    if PART_MARKER.is_match(line) {
        return None;
    }
    if let Some(c) = HEADER.captures(line) {
        let whole = c.get(0).unwrap();
        return Some((c[1].trim().to_string(), &line[whole.end()..]));
    }
    if BARE_HEADERS.contains(&line) {
        return Some((line.to_string(), ""));
    }
    None
}

/// Splits a blob into `(header, body)` pairs; text before the first header gets `None`.
pub fn parse_sections(text: &str) -> Vec<(Option<String>, String)> {
    let mut out: Vec<(Option<String>, String)> = vec![(None, String::new())];
    for line in text.lines() {
        if let Some((name, rest)) = match_header(line) {
            out.push((Some(name), rest.trim().to_string()));
        } else {
            let body = &mut out.last_mut().unwrap().1;
            if !body.is_empty() {
                body.push('\n');
            }
            body.push_str(line);
        }
    }
    out.into_iter()
        .filter(|(h, b)| h.is_some() || !b.trim().is_empty())
        .map(|(h, b)| (h, b.trim().to_string()))
        .collect()
}

/// Returns the named section, matched case-insensitively either as a key of
/// the report's section map or as a header embedded in a section's text.
pub fn extract_section(report: &PathologyReport, section: &str) -> Option<String> {
    let wanted = section.trim().to_uppercase();
    if let Some(text) = report.sections.get(&wanted) {
        return Some(text.trim().to_string());
    }
    report.sections.values().find_map(|text| {
        parse_sections(text)
            .into_iter()
            .find(|(h, _)| h.as_deref() == Some(wanted.as_str()))
            .map(|(_, body)| body)
    })
}

static BLANK_LINES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\n[ \t]*\n").unwrap());

/// Splits a section into per-part texts. Enumerated part markers take
/// precedence, then blank-line blocks; otherwise the whole text is one part.
pub fn split_elements(section_text: &str) -> Vec<String> {
    let lines: Vec<&str> = section_text.lines().collect();
    let has_markers = lines.iter().any(|l| PART_MARKER.is_match(l.trim_start()));
    let parts: Vec<String> = if has_markers {
        let mut parts = vec![String::new()];
        for line in lines {
            let trimmed = line.trim_start();
            if let Some(m) = PART_MARKER.find(trimmed) {
                parts.push(trimmed[m.end()..].to_string());
            } else {
                let cur = parts.last_mut().unwrap();
                cur.push('\n');
                cur.push_str(line);
            }
        }
        parts
    } else {
        let normalized = section_text.replace("\r\n", "\n");
        BLANK_LINES.split(&normalized).map(str::to_string).collect()
    };
    parts
        .into_iter()
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect()
}

static ACCESSION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b[a-z]{1,3}-?\d{5,}\b").unwrap());
static PERSON_NAME: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"\b(?:(?:Dr|DR|Mr|MR|Mrs|MRS|Ms|MS|Prof|PROF)\.|Dr|DR)\s+(?:[A-Z]\.\s*)*[A-Z][A-Za-z'-]+(?:\s+[A-Z][A-Za-z'-]+)?",
    )
    .unwrap()
});

/// Lowercases, removes identifiers and numbers, and collapses whitespace.
///
/// Digits are removed from every token; a token left without any letter or
/// digit is dropped, so `"grade 3"` becomes `"grade"` and `"t2"` becomes `"t"`.
/// Idempotent.
pub fn normalize(text: &str) -> String {
    let text = ACCESSION.replace_all(text, " ");
    let text = PERSON_NAME.replace_all(&text, " ");
    let text = text.to_lowercase();
    let mut out = String::with_capacity(text.len());
    for token in text.split_whitespace() {
        let kept: std::borrow::Cow<str> = if token.bytes().any(|b| b.is_ascii_digit()) {
            let stripped: String = token.chars().filter(|c| !c.is_ascii_digit()).collect();
            if !stripped.chars().any(char::is_alphanumeric) {
                continue;
            }
            stripped.into()
        } else {
            token.into()
        };
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&kept);
    }
    out
}

/// Extracts, splits and normalizes the named section of every report.
/// Report labels propagate to each of its elements. Output order follows
/// input order regardless of the worker count.
pub fn preprocess(reports: &[PathologyReport], section: &str) -> Vec<DiagnosisElement> {
    reports
        .par_iter()
        .map(|report| {
            let Some(body) = extract_section(report, section) else {
                return Vec::new();
            };
            split_elements(&body)
                .into_iter()
                .map(|raw| normalize(&raw))
                .filter(|t| !t.is_empty())
                .map(|text| {
                    let mut e = DiagnosisElement::new(
                        report.report_id.clone(),
                        report.patient_id.clone(),
                        text,
                        report.labels.clone(),
                    );
                    e.year = report.report_year;
                    e
                })
                .collect()
        })
        .collect::<Vec<Vec<_>>>()
        .into_iter()
        .flatten()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<DiagnosisElement>,
    pub validation: Vec<DiagnosisElement>,
    pub test: Vec<DiagnosisElement>,
    pub seed: u64,
}

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// Bucket sizes by largest remainder: floor every exact share, then hand the
/// leftover elements to the largest fractional parts (earlier bucket on ties).
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> [usize; 3] {
    let exact = [n as f64 * ratios.0, n as f64 * ratios.1, n as f64 * ratios.2];
    let mut sizes = exact.map(|x| x.floor() as usize);
    let assigned: usize = sizes.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Deterministic shuffle under `seed`, then a contiguous train/validation/test partition.
pub fn make_split(elements: &[DiagnosisElement], ratios: (f64, f64, f64), seed: u64) -> Result<CorpusSplit> {
    if elements.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 || ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(Error::Config(format!(
            "split ratios must be nonnegative and sum to 1, got {ratios:?}"
        )));
    }
    let mut order: Vec<usize> = (0..elements.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [n_train, n_val, _] = split_sizes(elements.len(), ratios);
    let take = |idx: &[usize]| idx.iter().map(|&i| elements[i].clone()).collect::<Vec<_>>();
    Ok(CorpusSplit {
        train: take(&order[..n_train]),
        validation: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
        seed,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_patients: usize,
    pub n_reports: usize,
    /// Mean element length in whitespace tokens.
    pub mean_report_size: f64,
    /// Population standard deviation of element length.
    pub std_report_size: f64,
    pub n_words: usize,
    pub n_unique_tokens: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_year: BTreeMap<i32, CorpusStats>,
}

pub fn compute_stats(elements: &[DiagnosisElement]) -> CorpusStats {
    let mut stats = stats_of(elements.iter());
    let mut years: BTreeMap<i32, Vec<&DiagnosisElement>> = BTreeMap::new();
    for e in elements {
        if let Some(y) = e.year {
            years.entry(y).or_default().push(e);
        }
    }
    stats.per_year = years.into_iter().map(|(y, es)| (y, stats_of(es.into_iter()))).collect();
    stats
}

fn stats_of<'a>(elements: impl Iterator<Item = &'a DiagnosisElement>) -> CorpusStats {
    let mut patients = HashSet::new();
    let mut reports = HashSet::new();
    let mut unique = HashSet::new();
    let mut counts = Vec::new();
    for e in elements {
        patients.insert(e.patient_id.as_str());
        reports.insert(e.source_report_id.as_str());
        unique.extend(e.text.split_whitespace());
        counts.push(e.token_count as f64);
    }
    if counts.is_empty() {
        return CorpusStats::default();
    }
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    CorpusStats {
        n_patients: patients.len(),
        n_reports: reports.len(),
        mean_report_size: mean,
        std_report_size: var.sqrt(),
        n_words: counts.iter().sum::<f64>() as usize,
        n_unique_tokens: unique.len(),
        per_year: BTreeMap::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn report(sections: &[(&str, &str)]) -> PathologyReport {
        PathologyReport {
            report_id: "r1".into(),
            patient_id: "p1".into(),
            sections: sections.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            labels: None,
            report_year: None,
        }
    }

    fn elements(texts: &[&str]) -> Vec<DiagnosisElement> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| DiagnosisElement::new(format!("r{i}"), "p", *t, None))
            .collect()
    }

    #[test]
    fn ingest_counts_good_and_skipped_records() {
        let good = r#"{"report_id":"a","patient_id":"p","sections":{"diagnosis":"x"}}"#;
        let three = [good, &good.replace("\"a\"", "\"b\""), &good.replace("\"a\"", "\"c\"")].join("\n");
        let got = ingest_jsonl_str(&three);
        assert_eq!((got.reports.len(), got.skipped), (3, 0));
        assert!(got.reports[0].sections.contains_key("DIAGNOSIS"));

        let missing = r#"{"patient_id":"p","sections":{"DIAGNOSIS":"x"}}"#;
        let mixed = [good, missing, &good.replace("\"a\"", "\"b\"")].join("\n");
        let got = ingest_jsonl_str(&mixed);
        assert_eq!((got.reports.len(), got.skipped), (2, 1));

        let got = ingest_jsonl_str("");
        assert_eq!((got.reports.len(), got.skipped), (0, 0));
    }

    #[test]
    fn ingest_skips_duplicate_ids_and_garbage() {
        let good = r#"{"report_id":"a","sections":{}}"#;
        let got = ingest_jsonl_str(&format!("{good}\n{good}\nnot json\n"));
        assert_eq!((got.reports.len(), got.skipped), (1, 2));
    }

    #[test]
    fn ingest_plain_dir_reads_files_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.txt"), "DIAGNOSIS: two").unwrap();
        fs::write(dir.path().join("a.txt"), "DIAGNOSIS: one").unwrap();
        let got = ingest(dir.path(), InputFormat::PlainDir).unwrap();
        assert_eq!(got.reports.len(), 2);
        assert_eq!(got.reports[0].report_id, "a");
        assert_eq!(extract_section(&got.reports[1], "diagnosis").as_deref(), Some("two"));
    }

    #[test]
    fn ingest_missing_path_is_fatal() {
        let err = ingest(Path::new("/nonexistent/x.jsonl"), InputFormat::Jsonl).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.jsonl"));
    }

    #[test]
    fn extract_section_by_key() {
        let r = report(&[("HISTORY", "h"), ("DIAGNOSIS", "d")]);
        assert_eq!(extract_section(&r, "DIAGNOSIS").as_deref(), Some("d"));
        let r = report(&[("HISTORY", "h")]);
        assert_eq!(extract_section(&r, "DIAGNOSIS"), None);
    }

    #[test]
    fn extract_section_from_blob() {
        let r = report(&[("", "HISTORY: h\nDIAGNOSIS: invasive carcinoma\nCOMMENTS: c")]);
        assert_eq!(extract_section(&r, "diagnosis").as_deref(), Some("invasive carcinoma"));
        assert_eq!(extract_section(&r, "COMMENTS").as_deref(), Some("c"));
    }

    #[test]
    fn extract_section_keeps_part_markers_and_bare_headers() {
        let blob = "DIAGNOSIS:\nPART 1: BENIGN BREAST TISSUE\nPART 2: FIBROADENOMA\nCOMMENT\nsee note";
        let r = report(&[("", blob)]);
        let d = extract_section(&r, "DIAGNOSIS").unwrap();
        assert_eq!(d, "PART 1: BENIGN BREAST TISSUE\nPART 2: FIBROADENOMA");
        assert_eq!(split_elements(&d), vec!["BENIGN BREAST TISSUE", "FIBROADENOMA"]);
    }

    #[test]
    fn split_on_lettered_markers() {
        assert_eq!(
            split_elements("a) benign tissue\nb) invasive carcinoma"),
            vec!["benign tissue", "invasive carcinoma"]
        );
        assert_eq!(split_elements("single finding"), vec!["single finding"]);
        assert!(split_elements("").is_empty());
    }

    #[test]
    fn split_on_blank_lines_and_continuations() {
        assert_eq!(split_elements("one\n\n  \ntwo\nmore"), vec!["one", "two\nmore"]);
        assert_eq!(
            split_elements("left breast:\nA) cyst\n   with fibrosis\nB) fat necrosis"),
            vec!["left breast:", "cyst\n   with fibrosis", "fat necrosis"]
        );
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("Invasive Ductal CARCINOMA"), "invasive ductal carcinoma");
        assert_eq!(normalize("nottingham grade 3 tumor 12 mm"), "nottingham grade tumor mm");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("pT2  N0\tstage"), "pt n stage");
        assert_eq!(normalize("size 1.5 cm"), "size cm");
    }

    #[test]
    fn normalize_removes_identifiers() {
        assert_eq!(normalize("Reviewed by Dr. John Smith today"), "reviewed by today");
        assert_eq!(normalize("case S-1234567 benign"), "case benign");
        assert_eq!(normalize("see AB123456"), "see");
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "[ -~\n\t]{0,80}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once), once.clone());
            prop_assert!(!once.bytes().any(|b| b.is_ascii_uppercase() || b.is_ascii_digit()));
        }

        #[test]
        fn split_partitions_input(n in 1usize..400, seed in 0u64..1000) {
            let texts: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
            let es: Vec<_> = texts
                .iter()
                .enumerate()
                .map(|(i, t)| DiagnosisElement::new(i.to_string(), "p", t.clone(), None))
                .collect();
            let split = make_split(&es, DEFAULT_RATIOS, seed).unwrap();
            let exact = [n as f64 * 0.7, n as f64 * 0.1, n as f64 * 0.2];
            for (got, want) in [split.train.len(), split.validation.len(), split.test.len()].iter().zip(exact) {
                prop_assert!((*got as f64 - want).abs() <= 1.0);
            }
            let mut ids: Vec<String> = split.train.iter().chain(&split.validation).chain(&split.test)
                .map(|e| e.source_report_id.clone()).collect();
            ids.sort();
            let mut want: Vec<String> = (0..n).map(|i| i.to_string()).collect();
            want.sort();
            prop_assert_eq!(ids, want);
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let es = elements(&["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"]);
        let s1 = make_split(&es, DEFAULT_RATIOS, 42).unwrap();
        assert_eq!((s1.train.len(), s1.validation.len(), s1.test.len()), (7, 1, 2));
        assert_eq!(s1, make_split(&es, DEFAULT_RATIOS, 42).unwrap());
        assert_ne!(s1.train, make_split(&es, DEFAULT_RATIOS, 7).unwrap().train);
        assert!(matches!(make_split(&[], DEFAULT_RATIOS, 1), Err(Error::EmptyCorpus)));
        assert!(make_split(&es, (0.5, 0.1, 0.1), 1).is_err());
    }

    #[test]
    fn split_sizes_at_corpus_scale() {
        let sizes = split_sizes(340_492, DEFAULT_RATIOS);
        assert!(sizes[0] == 238_344 || sizes[0] == 238_345);
        assert_eq!(sizes.iter().sum::<usize>(), 340_492);
        // floor(0.1 n) = 34,049 and the remainder 68,098 to 68,099.
        assert_eq!(sizes[1], 34_049);
    }

    #[test]
    fn stats_examples() {
        let s = compute_stats(&elements(&["a b", "a b c d"]));
        assert_eq!((s.n_words, s.n_unique_tokens), (6, 4));
        assert_eq!((s.mean_report_size, s.std_report_size), (3.0, 1.0));
        let s = compute_stats(&elements(&["a"]));
        assert_eq!((s.mean_report_size, s.std_report_size), (1.0, 0.0));
        assert_eq!(compute_stats(&[]), CorpusStats::default());
        let s = compute_stats(&elements(&["x y z"; 5]));
        assert_eq!((s.mean_report_size, s.std_report_size), (3.0, 0.0));
    }

    #[test]
    fn stats_break_down_by_year() {
        let mut es = elements(&["a b", "c", "d e f"]);
        es[0].year = Some(2001);
        es[1].year = Some(2001);
        es[2].year = Some(2019);
        let s = compute_stats(&es);
        assert_eq!(s.per_year.len(), 2);
        assert_eq!(s.per_year[&2001].n_words, 3);
        assert_eq!(s.per_year[&2019].mean_report_size, 3.0);
    }

    #[test]
    fn preprocess_keeps_order_and_labels() {
        let mut r = report(&[("DIAGNOSIS", "A) Benign tissue 2 cm\nB) Invasive carcinoma")]);
        r.labels = Some(["B".to_string()].into());
        let out = preprocess(&[r], DIAGNOSIS);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].text, "benign tissue cm");
        assert_eq!(out[0].token_count, 3);
        assert_eq!(out[1].labels, Some(["B".to_string()].into()));
        for e in &out {
            assert_eq!(normalize(&e.text), e.text);
        }
    }

    #[test]
    fn element_json_shape() {
        let e = DiagnosisElement::new("r", "p", "a b", None);
        let json = serde_json::to_string(&e).unwrap();
        assert_eq!(json, r#"{"report_id":"r","patient_id":"p","text":"a b"}"#);
        let back: DiagnosisElement = serde_json::from_str(&json).unwrap();
        assert_eq!(back.token_count, 2);
    }
}
