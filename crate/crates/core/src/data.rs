//! Tokenisation, vocabulary, dataset loaders and the synthetic shortcut
//! dataset used to make the regularisation effect observable at desk scale.
//!
//! File formats:
//! - classification: UTF-8 TSV, one `text<TAB>label` per line
//! - tagging: CoNLL-style `token<SPACE>tag` lines, blank line between
//!   sentences
//! - entailment: `premise<TAB>hypothesis<TAB>label` TSV
//!
//! Tokenisation is whitespace splitting plus lowercasing throughout.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token → id map with reserved ids 0 (pad) and 1 (unknown). Construction is
/// deterministic: tokens rank by descending frequency, ties broken
/// lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    pub fn build<'a, I>(corpus: I, max_size: usize, min_freq: u64) -> Vocab
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for token in corpus {
            *counts.entry(token).or_insert(0) += 1;
        }
        let mut ranked: Vec<(&str, u64)> =
            counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let keep = max_size.saturating_sub(2);
        ranked.truncate(keep);

        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        Vocab::from_tokens(tokens)
    }

    /// Rebuild from an id-ordered token list (checkpoint manifests store this
    /// exact list).
    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, ids }
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Deterministic string-label → id map (sorted unique names).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn build<'a, I>(labels: I) -> LabelMap
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut names: Vec<String> = labels.into_iter().map(|s| s.to_string()).collect();
        names.sort();
        names.dedup();
        LabelMap { names }
    }

    pub fn from_names(names: Vec<String>) -> LabelMap {
        LabelMap { names }
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).map_err(|_| Error::Contract {
            op: "LabelMap::id",
            msg: format!("unknown label {name:?}"),
        })
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClsRecord {
    pub tokens: Vec<String>,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagRecord {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairRecord {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub label: String,
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), line, msg: msg.into() }
}

/// Load `text<TAB>label` classification data. Ordering follows the file.
pub fn load_tsv_classification(path: impl AsRef<Path>) -> Result<Vec<ClsRecord>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(parse_err(path, lineno, format!("expected text<TAB>label, found {} fields", fields.len())));
        }
        let tokens = tokenize(fields[0]);
        if tokens.is_empty() {
            return Err(parse_err(path, lineno, "empty text"));
        }
        if fields[1].is_empty() {
            return Err(parse_err(path, lineno, "empty label"));
        }
        records.push(ClsRecord { tokens, label: fields[1].to_string() });
    }
    Ok(records)
}

pub fn save_tsv_classification(path: impl AsRef<Path>, records: &[ClsRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.tokens.join(" "));
        out.push('\t');
        out.push_str(&r.label);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Load CoNLL-style `token tag` lines with blank-line sentence breaks.
/// Trailing blank lines are ignored.
pub fn load_conll(path: impl AsRef<Path>) -> Result<Vec<TagRecord>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path)?;
    let mut records = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            if !tokens.is_empty() {
                records.push(TagRecord {
                    tokens: std::mem::take(&mut tokens),
                    tags: std::mem::take(&mut tags),
                });
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(parse_err(path, lineno, format!("expected token<SPACE>tag, found {} fields", fields.len())));
        }
        tokens.push(fields[0].to_lowercase());
        tags.push(fields[1].to_string());
    }
    if !tokens.is_empty() {
        records.push(TagRecord { tokens, tags });
    }
    Ok(records)
}

pub fn save_conll(path: impl AsRef<Path>, records: &[TagRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        for (token, tag) in r.tokens.iter().zip(&r.tags) {
            out.push_str(token);
            out.push(' ');
            out.push_str(tag);
            out.push('\n');
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Load `premise<TAB>hypothesis<TAB>label` sentence pairs.
pub fn load_pair_tsv(path: impl AsRef<Path>) -> Result<Vec<PairRecord>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected premise<TAB>hypothesis<TAB>label, found {} fields", fields.len()),
            ));
        }
        let premise = tokenize(fields[0]);
        let hypothesis = tokenize(fields[1]);
        if premise.is_empty() || hypothesis.is_empty() {
            return Err(parse_err(path, lineno, "empty sentence"));
        }
        if fields[2].is_empty() {
            return Err(parse_err(path, lineno, "empty label"));
        }
        records.push(PairRecord { premise, hypothesis, label: fields[2].to_string() });
    }
    Ok(records)
}

pub fn save_pair_tsv(path: impl AsRef<Path>, records: &[PairRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.premise.join(" "));
        out.push('\t');
        out.push_str(&r.hypothesis.join(" "));
        out.push('\t');
        out.push_str(&r.label);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Encoded example, ready for the training loop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Example {
    Cls { tokens: Vec<u32>, label: usize },
    Tag { tokens: Vec<u32>, tags: Vec<usize> },
    Pair { premise: Vec<u32>, hypothesis: Vec<u32>, label: usize },
}

fn encode_tokens(tokens: &[String], vocab: &Vocab, max_len: usize) -> Vec<u32> {
    tokens.iter().take(max_len).map(|t| vocab.id(t)).collect()
}

pub fn encode_cls(
    records: &[ClsRecord],
    vocab: &Vocab,
    labels: &LabelMap,
    max_len: usize,
) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            Ok(Example::Cls {
                tokens: encode_tokens(&r.tokens, vocab, max_len),
                label: labels.id(&r.label)?,
            })
        })
        .collect()
}

pub fn encode_tag(
    records: &[TagRecord],
    vocab: &Vocab,
    tags: &LabelMap,
    max_len: usize,
) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let tokens = encode_tokens(&r.tokens, vocab, max_len);
            let tag_ids = r
                .tags
                .iter()
                .take(tokens.len())
                .map(|t| tags.id(t))
                .collect::<Result<Vec<_>>>()?;
            Ok(Example::Tag { tokens, tags: tag_ids })
        })
        .collect()
}

pub fn encode_pair(
    records: &[PairRecord],
    vocab: &Vocab,
    labels: &LabelMap,
    max_len: usize,
) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            Ok(Example::Pair {
                premise: encode_tokens(&r.premise, vocab, max_len),
                hypothesis: encode_tokens(&r.hypothesis, vocab, max_len),
                label: labels.id(&r.label)?,
            })
        })
        .collect()
}

/// Synthetic binary classification with a planted shortcut.
///
/// Every example carries one shortcut token that matches the label with
/// probability `shortcut_reliability` on the train split but only 0.5 on the
/// dev/test splits, plus a distributed bag of signal tokens drawn from a
/// label-specific pool which predicts the label perfectly on every split.
/// A model leaning on the shortcut overfits; one reading the distributed
/// signal generalises.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub train: Vec<ClsRecord>,
    pub dev: Vec<ClsRecord>,
    pub test: Vec<ClsRecord>,
    /// Signal pools, exposed so tests can run the bag-of-words oracle.
    pub signal_pools: [Vec<String>; 2],
}

/// Signal tokens drawn per example.
const SYNTH_SIGNAL_COUNT: usize = 3;

pub fn synth_shortcut_dataset(
    n: usize,
    l: usize,
    vocab_size: usize,
    shortcut_reliability: f64,
    seed: u64,
) -> Result<SynthDataset> {
    if n == 0 {
        return Err(Error::Config { field: "data.synth.n".into(), msg: "n must be positive".into() });
    }
    if !(0.5..=1.0).contains(&shortcut_reliability) {
        return Err(Error::Config {
            field: "data.synth.reliability".into(),
            msg: format!("shortcut reliability must be in [0.5, 1], got {shortcut_reliability}"),
        });
    }
    if l < SYNTH_SIGNAL_COUNT + 2 {
        return Err(Error::Config {
            field: "data.synth.l".into(),
            msg: format!("sequence length must be at least {}", SYNTH_SIGNAL_COUNT + 2),
        });
    }
    let pool = (vocab_size / 8).max(2);
    let filler = vocab_size.saturating_sub(2 + 2 * pool);
    if filler < 2 {
        return Err(Error::Config {
            field: "data.synth.vocab".into(),
            msg: format!("vocab size {vocab_size} too small for two signal pools plus filler"),
        });
    }
    let pool_a: Vec<String> = (0..pool).map(|i| format!("a{i:03}")).collect();
    let pool_b: Vec<String> = (0..pool).map(|i| format!("b{i:03}")).collect();
    let fillers: Vec<String> = (0..filler).map(|i| format!("f{i:03}")).collect();

    let gen_split = |count: usize, reliability: f64, key: u64| -> Vec<ClsRecord> {
        let mut r = rng::stream(rng::derive_seed(seed, key));
        (0..count)
            .map(|_| {
                let label = r.gen_bool(0.5) as usize;
                let mut tokens: Vec<String> = Vec::with_capacity(l);
                let shortcut_matches = r.gen_bool(reliability);
                let shortcut_label = if shortcut_matches { label } else { 1 - label };
                tokens.push(format!("s{shortcut_label}"));
                let signal = if label == 0 { &pool_a } else { &pool_b };
                for _ in 0..SYNTH_SIGNAL_COUNT {
                    tokens.push(signal[r.gen_range(0..signal.len())].clone());
                }
                while tokens.len() < l {
                    tokens.push(fillers[r.gen_range(0..fillers.len())].clone());
                }
                tokens.shuffle(&mut r);
                ClsRecord { tokens, label: label.to_string() }
            })
            .collect()
    };

    let train = gen_split(n, shortcut_reliability, 1);
    let dev = gen_split((n / 5).max(1), 0.5, 2);
    let test = gen_split((n / 5).max(1), 0.5, 3);
    Ok(SynthDataset { train, dev, test, signal_pools: [pool_a, pool_b] })
}
