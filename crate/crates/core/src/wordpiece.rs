//! Uncased WordPiece vocabularies: likelihood-scored pair-merge training and
//! greedy longest-match-first tokenization.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const N_SPECIAL: u32 = 5;

pub const CONTINUATION: &str = "##";

/// Words longer than this many characters become a single `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered token list whose first five
    /// entries are the special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s) {
            return Err(Error::Invalid(format!(
                "vocabulary must start with {}",
                SPECIAL_TOKENS.join(", ")
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if i >= SPECIAL_TOKENS.len() && !is_well_formed_piece(t) {
                return Err(Error::Invalid(format!("malformed vocabulary token {t:?} at line {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Accepts token lists from other toolkits (special tokens anywhere,
    /// placeholder entries). Specials are moved to ids 0-4, duplicates and
    /// malformed pieces are dropped; other tokens keep their relative order.
    pub fn from_foreign_tokens(tokens: Vec<String>) -> Self {
        if let Ok(v) = Vocabulary::from_tokens(tokens.clone()) {
            return v;
        }
        let mut out: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeSet<String> = out.iter().cloned().collect();
        for t in tokens {
            if is_well_formed_piece(&t) && seen.insert(t.clone()) {
                out.push(t);
            }
        }
        Vocabulary::from_tokens(out).expect("foreign vocabulary sanitized")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tokens(read_lines(path)?)
    }

    pub fn load_foreign(path: &Path) -> Result<Self> {
        Ok(Self::from_foreign_tokens(read_lines(path)?))
    }

    /// One token per line, line number = id.
    pub fn to_file_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out.into_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_file_bytes())
    }

    /// SHA-256 of the vocabulary file contents, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_bytes()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: u32) -> bool {
        id < N_SPECIAL
    }

    /// True when `word` is a word-initial (non-special, non-continuation) token.
    pub fn contains_word(&self, word: &str) -> bool {
        match self.index.get(word) {
            Some(&id) => !Self::is_special(id) && !word.starts_with(CONTINUATION),
            None => false,
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_to_string(path)?
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

fn is_well_formed_piece(t: &str) -> bool {
    match t.strip_prefix(CONTINUATION) {
        Some(rest) => !rest.is_empty() && !rest.chars().any(char::is_whitespace),
        None => !t.is_empty() && !t.chars().any(char::is_whitespace),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub vocab_size: usize,
    pub min_frequency: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            vocab_size: 13_000,
            min_frequency: 2,
        }
    }
}

/// Trains an uncased WordPiece vocabulary.
///
/// Words rarer than `min_frequency` are discarded. Every character of the
/// remaining words enters the alphabet as a word-initial piece, and as a
/// `##` piece when it also occurs word-internally. The trainer then
/// repeatedly merges the adjacent pair with the highest
/// `freq(pair) / (freq(left) * freq(right))`, breaking ties toward the
/// lexicographically smallest merged string, until the vocabulary is full or
/// no pair occurs at least `min_frequency` times.
pub fn train_vocab<I, S>(corpus: I, config: &TrainerConfig) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if config.min_frequency < 1 {
        return Err(Error::Config("min_frequency must be at least 1".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for text in corpus {
        for word in text.as_ref().split_whitespace() {
            *counts.entry(word.to_lowercase()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut words: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= config.min_frequency && w.chars().count() <= MAX_WORD_CHARS)
        .collect();
    words.sort();

    let mut alphabet = BTreeSet::new();
    for (w, _) in &words {
        for (i, c) in w.chars().enumerate() {
            alphabet.insert(c.to_string());
            if i > 0 {
                alphabet.insert(format!("{CONTINUATION}{c}"));
            }
        }
    }
    let n_base = SPECIAL_TOKENS.len() + alphabet.len();
    if config.vocab_size < n_base {
        return Err(Error::Config(format!(
            "vocab_size {} is smaller than alphabet plus special tokens ({n_base})",
            config.vocab_size
        )));
    }

    let mut table = PieceTable::default();
    for piece in &alphabet {
        table.intern(piece);
    }
    let mut segmented: Vec<(Vec<u32>, u64)> = words
        .iter()
        .map(|(w, c)| {
            let pieces = w
                .chars()
                .enumerate()
                .map(|(i, ch)| {
                    let s = if i == 0 {
                        ch.to_string()
                    } else {
                        format!("{CONTINUATION}{ch}")
                    };
                    table.id(&s)
                })
                .collect();
            (pieces, *c)
        })
        .collect();

    let mut stats = MergeStats::default();
    for (pieces, c) in &segmented {
        stats.add_word(pieces, *c as i64);
    }

    let mut vocab_len = n_base;
    while vocab_len < config.vocab_size {
        let Some((left, right)) = stats.best_pair(&table, config.min_frequency) else {
            break;
        };
        let merged = table.merged_string(left, right);
        let is_new = !table.contains(&merged);
        let merged_id = table.intern(&merged);
        if is_new {
            vocab_len += 1;
        }
        for (pieces, c) in segmented.iter_mut() {
            if !pieces.windows(2).any(|w| w[0] == left && w[1] == right) {
                continue;
            }
            stats.add_word(pieces, -(*c as i64));
            let mut out = Vec::with_capacity(pieces.len());
            let mut i = 0;
            while i < pieces.len() {
                if i + 1 < pieces.len() && pieces[i] == left && pieces[i + 1] == right {
                    out.push(merged_id);
                    i += 2;
                } else {
                    out.push(pieces[i]);
                    i += 1;
                }
            }
            *pieces = out;
            stats.add_word(pieces, *c as i64);
        }
    }

    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(table.strings)
        .collect();
    Vocabulary::from_tokens(tokens)
}

#[derive(Default)]
struct PieceTable {
    strings: Vec<String>,
    ids: HashMap<String, u32>,
}

impl PieceTable {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.ids.get(s) {
            return id;
        }
        let id = self.strings.len() as u32;
        self.strings.push(s.to_string());
        self.ids.insert(s.to_string(), id);
        id
    }

    fn id(&self, s: &str) -> u32 {
        self.ids[s]
    }

    fn contains(&self, s: &str) -> bool {
        self.ids.contains_key(s)
    }

    fn merged_string(&self, left: u32, right: u32) -> String {
        let r = &self.strings[right as usize];
        format!(
            "{}{}",
            self.strings[left as usize],
            r.strip_prefix(CONTINUATION).unwrap_or(r)
        )
    }
}

#[derive(Default)]
struct MergeStats {
    piece_freq: HashMap<u32, i64>,
    pair_freq: HashMap<(u32, u32), i64>,
}

impl MergeStats {
    fn add_word(&mut self, pieces: &[u32], count: i64) {
        for &p in pieces {
            *self.piece_freq.entry(p).or_default() += count;
        }
        for w in pieces.windows(2) {
            let e = self.pair_freq.entry((w[0], w[1])).or_default();
            *e += count;
            if *e == 0 {
                self.pair_freq.remove(&(w[0], w[1]));
            }
        }
    }

    fn best_pair(&self, table: &PieceTable, min_frequency: u64) -> Option<(u32, u32)> {
        let mut best: Option<((u32, u32), i64, u128, String)> = None;
        for (&(l, r), &count) in &self.pair_freq {
            if count < min_frequency as i64 {
                continue;
            }
            let denom = self.piece_freq[&l] as u128 * self.piece_freq[&r] as u128;
            let better = match &best {
                None => true,
                Some((_, bc, bd, bs)) => {
                    // count/denom vs bc/bd, compared exactly.
                    match (count as u128 * bd).cmp(&(*bc as u128 * denom)) {
                        Ordering::Greater => true,
                        Ordering::Less => false,
                        Ordering::Equal => table.merged_string(l, r) < *bs,
                    }
                }
            };
            if better {
                best = Some(((l, r), count, denom, table.merged_string(l, r)));
            }
        }
        best.map(|(pair, ..)| pair)
    }
}

/// Subword pieces of a text, grouped back into source words.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub pieces: Vec<String>,
    /// Half-open `(start, end)` piece ranges, one per source word.
    pub word_boundaries: Vec<(usize, usize)>,
}

/// Greedy longest-match-first WordPiece tokenization. A word with any
/// unmatched position becomes a single `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut seq = TokenSequence::default();
    for word in text.split_whitespace() {
        let start = seq.ids.len();
        match tokenize_word(word, vocab) {
            Some(pieces) => {
                for (id, piece) in pieces {
                    seq.ids.push(id);
                    seq.pieces.push(piece);
                }
            }
            None => {
                seq.ids.push(UNK_ID);
                seq.pieces.push(UNK.to_string());
            }
        }
        seq.word_boundaries.push((start, seq.ids.len()));
    }
    seq
}

fn tokenize_word(word: &str, vocab: &Vocabulary) -> Option<Vec<(u32, String)>> {
    let bounds: Vec<usize> = word
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(word.len()))
        .collect();
    if bounds.len() - 1 > MAX_WORD_CHARS {
        return None;
    }
    let mut out = Vec::new();
    let mut start = 0;
    let mut candidate = String::with_capacity(word.len() + 2);
    while start < bounds.len() - 1 {
        let mut found = None;
        for end in (start + 1..bounds.len()).rev() {
            candidate.clear();
            if start > 0 {
                candidate.push_str(CONTINUATION);
            }
            candidate.push_str(&word[bounds[start]..bounds[end]]);
            if let Some(id) = vocab.id_of(&candidate) {
                if !Vocabulary::is_special(id) {
                    found = Some((end, id));
                    break;
                }
            }
        }
        let (end, id) = found?;
        out.push((id, candidate.clone()));
        start = end;
    }
    Some(out)
}

/// Inverse of [`tokenize`] for words without `[UNK]`.
pub fn detokenize(seq: &TokenSequence) -> String {
    seq.word_boundaries
        .iter()
        .map(|&(s, e)| {
            seq.pieces[s..e]
                .iter()
                .map(|p| p.strip_prefix(CONTINUATION).unwrap_or(p))
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

/// `[CLS] pieces [SEP]`, truncated from the right to `max_len` without padding.
pub fn encode_unpadded(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    assert!(max_len >= 3, "max_len must be at least 3");
    let seq = tokenize(text, vocab);
    let mut ids = Vec::with_capacity(max_len.min(seq.ids.len() + 2));
    ids.push(CLS_ID);
    ids.extend(seq.ids.iter().take(max_len - 2));
    ids.push(SEP_ID);
    ids
}

/// `[CLS] pieces [SEP]` padded with `[PAD]` to exactly `max_len`.
pub fn encode_for_model(text: &str, vocab: &Vocabulary, max_len: usize) -> Encoded {
    let mut ids = encode_unpadded(text, vocab, max_len);
    let mut attention_mask = vec![1u8; ids.len()];
    ids.resize(max_len, PAD_ID);
    attention_mask.resize(max_len, 0);
    Encoded { ids, attention_mask }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(extra: &[&str]) -> Vocabulary {
        Vocabulary::from_tokens(SPECIAL_TOKENS.iter().chain(extra).map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn merge_scores_tie_break_toward_smaller_string() {
        let cfg = TrainerConfig {
            vocab_size: 10,
            min_frequency: 1,
        };
        let v = train_vocab(["aa", "aa", "ab"], &cfg).unwrap();
        for p in ["a", "##a", "b", "##b", "aa"] {
            assert!(v.id_of(p).is_some(), "missing {p}");
        }
        assert_eq!(v.len(), 10);
        // "aa" is the first merge.
        assert_eq!(v.token_of(9), Some("aa"));
    }

    #[test]
    fn single_character_word_needs_no_merges() {
        let cfg = TrainerConfig {
            vocab_size: 6,
            min_frequency: 1,
        };
        let v = train_vocab(["x"; 5], &cfg).unwrap();
        assert_eq!(v.tokens(), &["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "x"]);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["invasive ductal carcinoma", "ductal carcinoma in situ", "benign"];
        let cfg = TrainerConfig {
            vocab_size: 60,
            min_frequency: 1,
        };
        let a = train_vocab(corpus, &cfg).unwrap();
        let b = train_vocab(corpus, &cfg).unwrap();
        assert_eq!(a.to_file_bytes(), b.to_file_bytes());
        assert!(a.len() <= 60);
    }

    #[test]
    fn training_errors() {
        let cfg = TrainerConfig::default();
        assert!(matches!(train_vocab(Vec::<&str>::new(), &cfg), Err(Error::EmptyCorpus)));
        assert!(matches!(train_vocab(["   "], &cfg), Err(Error::EmptyCorpus)));
        let tiny = TrainerConfig {
            vocab_size: 6,
            min_frequency: 1,
        };
        assert!(matches!(train_vocab(["abc"], &tiny), Err(Error::Config(_))));
    }

    #[test]
    fn min_frequency_filters_words() {
        let cfg = TrainerConfig {
            vocab_size: 100,
            min_frequency: 2,
        };
        let v = train_vocab(["cyst cyst zebra"], &cfg).unwrap();
        assert!(v.contains_word("cyst"));
        assert!(v.id_of("z").is_none());
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab(&["carcinoma", "low", "##er"]);
        let s = tokenize("carcinoma", &v);
        assert_eq!(s.pieces, ["carcinoma"]);
        assert_eq!(s.word_boundaries, [(0, 1)]);
        let s = tokenize("lower", &v);
        assert_eq!(s.pieces, ["low", "##er"]);
        assert_eq!(detokenize(&s), "lower");

        let general = vocab(&["car", "##cin", "##oma", "##c", "##i"]);
        assert_eq!(tokenize("carcinoma", &general).pieces, ["car", "##cin", "##oma"]);
    }

    #[test]
    fn unknown_words_become_single_unk() {
        let v = vocab(&["low", "##er"]);
        let s = tokenize("lowest low", &v);
        assert_eq!(s.pieces, ["[UNK]", "low"]);
        assert_eq!(s.word_boundaries, [(0, 1), (1, 2)]);
        assert_eq!(detokenize(&s), "[UNK] low");
        let long = "a".repeat(101);
        let v = vocab(&["a", "##a"]);
        assert_eq!(tokenize(&long, &v).ids, [UNK_ID]);
        assert_eq!(tokenize(&"a".repeat(100), &v).ids.len(), 100);
    }

    #[test]
    fn detokenize_edge_cases() {
        assert_eq!(detokenize(&TokenSequence::default()), "");
    }

    #[test]
    fn encode_pads_and_truncates() {
        let v = vocab(&["benign", "x"]);
        let e = encode_for_model("benign", &v, 5);
        let benign = v.id_of("benign").unwrap();
        assert_eq!(e.ids, [CLS_ID, benign, SEP_ID, PAD_ID, PAD_ID]);
        assert_eq!(e.attention_mask, [1, 1, 1, 0, 0]);

        let long = vec!["x"; 100].join(" ");
        let e = encode_for_model(&long, &v, 64);
        assert_eq!(e.ids.len(), 64);
        assert_eq!(e.ids[63], SEP_ID);
        assert!(e.attention_mask.iter().all(|&m| m == 1));

        let e = encode_for_model("", &v, 4);
        assert_eq!(e.ids, [CLS_ID, SEP_ID, PAD_ID, PAD_ID]);
        assert_eq!(e.attention_mask, [1, 1, 0, 0]);
    }

    #[test]
    fn vocab_file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = vocab(&["a", "##b"]);
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.content_hash(), v.content_hash());
        for i in 0..v.len() as u32 {
            assert_eq!(v.id_of(v.token_of(i).unwrap()), Some(i));
        }
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
        let dup = SPECIAL_TOKENS
            .iter()
            .chain(&["a", "a"])
            .map(|s| s.to_string())
            .collect();
        assert!(Vocabulary::from_tokens(dup).is_err());
        let bad = SPECIAL_TOKENS.iter().chain(&["##"]).map(|s| s.to_string()).collect();
        assert!(Vocabulary::from_tokens(bad).is_err());
    }

    #[test]
    fn foreign_vocab_files_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bert.txt");
        std::fs::write(
            &path,
            "[PAD]\n[unused0]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nthe\n##s\ncar\n##cin\n##oma\n",
        )
        .unwrap();
        assert!(Vocabulary::load(&path).is_err());
        let v = Vocabulary::load_foreign(&path).unwrap();
        assert_eq!(v.id_of(MASK), Some(MASK_ID));
        assert_eq!(tokenize("carcinoma", &v).pieces, ["car", "##cin", "##oma"]);
        assert!(v.contains_word("[unused0]"));
        assert!(!v.contains_word("##s"));
    }
}
