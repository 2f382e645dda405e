//! Caption tokenization, document-frequency statistics and sentence
//! descriptiveness.
//!
//! A sentence's raw descriptiveness is the sum of the TF-IDF scores of its
//! distinct words, with document frequencies taken from a fixed pool of
//! sentences (the training split). Raw scores are min-max normalized over the
//! pool to give `delta` in `[0, 1]`; sentences outside the pool are scored
//! against the same statistics and clamped into the unit interval.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercased word tokens of one sentence, in order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Occurrence count of each distinct surface form.
    pub fn term_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for tok in &self.tokens {
            *counts.entry(tok.as_str()).or_insert(0) += 1;
        }
        counts
    }

    pub fn distinct(&self) -> BTreeSet<&str> {
        self.tokens.iter().map(String::as_str).collect()
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        TokenSequence {
            tokens: iter.into_iter().map(Into::into).collect(),
        }
    }
}

/// Lowercase and split on every non-alphanumeric character.
pub fn tokenize(text: &str) -> TokenSequence {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|frag| !frag.is_empty())
        .collect()
}

/// Logarithm used for the inverse document frequency.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum LogBase {
    #[default]
    Natural,
    Base(f64),
}

impl LogBase {
    fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Base(b) if b == 10.0 => x.log10(),
            LogBase::Base(b) if b == 2.0 => x.log2(),
            LogBase::Base(b) => x.ln() / b.ln(),
        }
    }
}

/// Document-frequency statistics over a fixed set of sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentPool {
    num_docs: usize,
    doc_freq: BTreeMap<String, usize>,
    smoothing: bool,
    log_base: LogBase,
}

impl DocumentPool {
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a TokenSequence>) -> Self {
        let mut num_docs = 0;
        let mut doc_freq = BTreeMap::new();
        for sentence in sentences {
            num_docs += 1;
            for word in sentence.distinct() {
                *doc_freq.entry(word.to_owned()).or_insert(0) += 1;
            }
        }
        DocumentPool {
            num_docs,
            doc_freq,
            smoothing: true,
            log_base: LogBase::Natural,
        }
    }

    /// When enabled (the default), a word absent from the pool is scored as
    /// if it occurred in exactly one pool sentence.
    pub fn with_smoothing(mut self, smoothing: bool) -> Self {
        self.smoothing = smoothing;
        self
    }

    pub fn with_log_base(mut self, base: LogBase) -> Self {
        self.log_base = base;
        self
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    pub fn doc_freq(&self, word: &str) -> usize {
        self.doc_freq.get(word).copied().unwrap_or(0)
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = (&str, usize)> {
        self.doc_freq.iter().map(|(w, &n)| (w.as_str(), n))
    }

    pub fn smoothing(&self) -> bool {
        self.smoothing
    }

    /// `log(M / M_w)`.
    pub fn idf(&self, word: &str) -> Result<f64> {
        if self.num_docs == 0 {
            return Err(Error::EmptyPool);
        }
        let df = match self.doc_freq(word) {
            0 if self.smoothing => 1,
            0 => return Err(Error::UnseenWord(word.to_owned())),
            n => n,
        };
        Ok(self.log_base.log(self.num_docs as f64 / df as f64))
    }
}

pub fn build_pool(sentences: &[TokenSequence]) -> DocumentPool {
    DocumentPool::build(sentences)
}

/// Term frequency of `word` in `sentence` times its inverse document
/// frequency in `pool`.
pub fn tfidf(word: &str, sentence: &TokenSequence, pool: &DocumentPool) -> Result<f64> {
    if sentence.is_empty() {
        return Err(Error::EmptySentence);
    }
    let count = sentence.tokens().iter().filter(|t| *t == word).count();
    let tf = count as f64 / sentence.len() as f64;
    Ok(tf * pool.idf(word)?)
}

/// Cumulative TF-IDF over the distinct words of the sentence.
pub fn raw_descriptiveness(sentence: &TokenSequence, pool: &DocumentPool) -> Result<f64> {
    if sentence.is_empty() {
        return Err(Error::EmptySentence);
    }
    if pool.num_docs() == 0 {
        return Err(Error::EmptyPool);
    }
    let n = sentence.len() as f64;
    sentence
        .term_counts()
        .into_iter()
        .try_fold(0.0, |acc, (word, count)| {
            Ok(acc + (count as f64 / n) * pool.idf(word)?)
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSentence {
    pub delta: f64,
    pub raw: f64,
}

/// Normalized descriptiveness per sentence id, plus the pool extremes used
/// for normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptivenessTable {
    pub raw_min: f64,
    pub raw_max: f64,
    entries: BTreeMap<String, ScoredSentence>,
}

impl DescriptivenessTable {
    /// Map a raw score through the stored min-max range, clamped to `[0, 1]`.
    /// A degenerate range maps everything to the midpoint.
    pub fn normalize(&self, raw: f64) -> f64 {
        let range = self.raw_max - self.raw_min;
        if range <= 0.0 {
            return 0.5;
        }
        ((raw - self.raw_min) / range).clamp(0.0, 1.0)
    }

    pub fn get(&self, id: &str) -> Option<ScoredSentence> {
        self.entries.get(id).copied()
    }

    pub fn delta(&self, id: &str) -> Option<f64> {
        self.entries.get(id).map(|s| s.delta)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ScoredSentence)> {
        self.entries.iter().map(|(id, s)| (id.as_str(), s))
    }

    /// Record a sentence scored outside the pool; its delta is normalized
    /// with the stored range and does not move `raw_min`/`raw_max`.
    pub fn insert_scored(&mut self, id: impl Into<String>, raw: f64) -> f64 {
        let delta = self.normalize(raw);
        self.entries.insert(id.into(), ScoredSentence { delta, raw });
        delta
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let header = TableHeader {
            raw_min: self.raw_min,
            raw_max: self.raw_max,
        };
        let mut write_line = |value: String| {
            out.write_all(value.as_bytes())
                .and_then(|_| out.write_all(b"\n"))
                .map_err(|e| Error::io(path, e))
        };
        write_line(serde_json::to_string(&header).expect("header serializes"))?;
        for (id, s) in &self.entries {
            let row = TableRow {
                id: id.clone(),
                delta: s.delta,
                raw: s.raw,
            };
            write_line(serde_json::to_string(&row).expect("row serializes"))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let header: TableHeader = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&line)
                    .map_err(|e| Error::format(path, format!("line 1: {e}")))?
            }
            None => return Err(Error::format(path, "missing header record")),
        };
        if header.raw_min > header.raw_max {
            return Err(Error::format(path, "raw_min exceeds raw_max"));
        }
        let mut entries = BTreeMap::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: TableRow = serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            if !(0.0..=1.0).contains(&row.delta) {
                return Err(Error::format(
                    path,
                    format!("line {}: delta {} outside [0, 1]", i + 1, row.delta),
                ));
            }
            entries.insert(
                row.id,
                ScoredSentence {
                    delta: row.delta,
                    raw: row.raw,
                },
            );
        }
        Ok(DescriptivenessTable {
            raw_min: header.raw_min,
            raw_max: header.raw_max,
            entries,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableHeader {
    raw_min: f64,
    raw_max: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableRow {
    id: String,
    delta: f64,
    raw: f64,
}

/// Min-max normalize raw pool scores into a table.
pub fn normalize_scores(raw: &BTreeMap<String, f64>) -> Result<DescriptivenessTable> {
    if raw.is_empty() {
        return Err(Error::EmptyScores);
    }
    let raw_min = raw.values().copied().fold(f64::INFINITY, f64::min);
    let raw_max = raw.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut table = DescriptivenessTable {
        raw_min,
        raw_max,
        entries: BTreeMap::new(),
    };
    for (id, &r) in raw {
        table.insert_scored(id.clone(), r);
    }
    Ok(table)
}

/// Score a sentence against the pool and normalize it with the table's
/// stored range.
pub fn score_out_of_pool(
    sentence: &TokenSequence,
    pool: &DocumentPool,
    table: &DescriptivenessTable,
) -> Result<f64> {
    let raw = raw_descriptiveness(sentence, pool)?;
    Ok(table.normalize(raw))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One caption in the ingestion format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub id: String,
    pub image_id: String,
    pub text: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<u8>,
}

pub fn read_corpus(path: &Path) -> Result<Vec<CaptionRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        if let Some(level) = rec.level {
            if !(1..=4).contains(&level) {
                return Err(Error::format(
                    path,
                    format!("line {}: level {level} outside 1..=4", i + 1),
                ));
            }
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::format(
                path,
                format!("line {}: duplicate id {:?}", i + 1, rec.id),
            ));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_corpus(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Build the pool from `pool_split`, normalize its sentences, then score every
/// other caption out of pool.
pub fn score_corpus(records: &[CaptionRecord], pool_split: Split) -> Result<DescriptivenessTable> {
    let tokenized: Vec<(&CaptionRecord, TokenSequence)> =
        records.iter().map(|r| (r, tokenize(&r.text))).collect();
    let pool = DocumentPool::build(
        tokenized
            .iter()
            .filter(|(r, _)| r.split == pool_split)
            .map(|(_, t)| t),
    );
    if pool.num_docs() == 0 {
        return Err(Error::EmptyPool);
    }
    let mut pool_raw = BTreeMap::new();
    let mut others = Vec::new();
    for (rec, tokens) in &tokenized {
        let raw = raw_descriptiveness(tokens, &pool).map_err(|e| match e {
            Error::EmptySentence => Error::InvalidConfig(format!("caption {:?} has no tokens", rec.id)),
            other => other,
        })?;
        if rec.split == pool_split {
            pool_raw.insert(rec.id.clone(), raw);
        } else {
            others.push((rec.id.clone(), raw));
        }
    }
    let mut table = normalize_scores(&pool_raw)?;
    for (id, raw) in others {
        table.insert_scored(id, raw);
    }
    Ok(table)
}
