//! Paired (source, target) datasets at function and commit granularity.
//!
//! Corpora are exchanged as JSON Lines: one object per line with keys
//! `id`, `source`, `target`, `origin` and an optional `language_hint`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

#[derive(Error, Debug)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("missing key: {key} at line {line}")]
    MissingKey { key: &'static str, line: usize },
    #[error("invalid value for key {key} at line {line}: {message}")]
    InvalidValue {
        key: &'static str,
        line: usize,
        message: String,
    },
    #[error("duplicate id: {0}")]
    DuplicateId(String),
    #[error("invalid split fractions: {0}")]
    InvalidSplit(String),
}

/// Which pairing level a sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    FunctionPair,
    CommitPair,
}

impl Origin {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "function_pair" => Some(Origin::FunctionPair),
            "commit_pair" => Some(Origin::CommitPair),
            _ => None,
        }
    }
}

/// One (code segment or diff, comment or commit message) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub source: String,
    pub target: String,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language_hint: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub provenance: String,
}

impl Corpus {
    pub fn new(samples: Vec<Sample>, provenance: impl Into<String>) -> Self {
        Self {
            samples,
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    fn derive(&self, samples: Vec<Sample>) -> Self {
        Self {
            samples,
            provenance: self.provenance.clone(),
        }
    }

    /// Fails with the first repeated id, if any.
    pub fn check_unique_ids(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(CorpusError::DuplicateId(s.id.clone()));
            }
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a Sample;
    type IntoIter = std::slice::Iter<'a, Sample>;

    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}

fn required_str(
    obj: &serde_json::Map<String, serde_json::Value>,
    key: &'static str,
    line: usize,
) -> Result<String, CorpusError> {
    match obj.get(key) {
        None => Err(CorpusError::MissingKey { key, line }),
        Some(serde_json::Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(CorpusError::InvalidValue {
            key,
            line,
            message: format!("expected string, found {other}"),
        }),
    }
}

fn parse_line(text: &str, line: usize) -> Result<Sample, CorpusError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
    let obj = value.as_object().ok_or_else(|| CorpusError::Malformed {
        line,
        message: "expected a JSON object".into(),
    })?;

    let id = required_str(obj, "id", line)?;
    let source = required_str(obj, "source", line)?;
    let target = required_str(obj, "target", line)?;
    let origin_raw = required_str(obj, "origin", line)?;
    let origin = Origin::parse(&origin_raw).ok_or_else(|| CorpusError::InvalidValue {
        key: "origin",
        line,
        message: format!("unknown origin {origin_raw:?}"),
    })?;
    let language_hint = match obj.get("language_hint") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(s.clone()),
        Some(other) => {
            return Err(CorpusError::InvalidValue {
                key: "language_hint",
                line,
                message: format!("expected string, found {other}"),
            })
        }
    };

    for (key, val) in [("source", &source), ("target", &target)] {
        if val.trim().is_empty() {
            return Err(CorpusError::InvalidValue {
                key,
                line,
                message: "empty after trimming".into(),
            });
        }
    }

    Ok(Sample {
        id,
        source,
        target,
        origin,
        language_hint,
    })
}

/// Parses JSONL text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_jsonl(text: &str, provenance: &str) -> Result<Corpus, CorpusError> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_line(line, i + 1)?);
    }
    let corpus = Corpus::new(samples, provenance);
    corpus.check_unique_ids()?;
    Ok(corpus)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_jsonl(&text, &path.display().to_string())
}

pub fn to_jsonl(corpus: &Corpus) -> String {
    let mut out = String::new();
    for sample in corpus {
        out.push_str(&serde_json::to_string(sample).expect("sample serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(to_jsonl(corpus).as_bytes()).map_err(io_err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupMode {
    /// Key on trimmed (source, target).
    ExactPair,
    /// Key on trimmed target only.
    TargetOnly,
}

/// Keeps the first sample for each key, preserving survivor order.
pub fn deduplicate(corpus: &Corpus, mode: DedupMode) -> Corpus {
    let mut seen: HashSet<(&str, &str)> = HashSet::new();
    let samples = corpus
        .iter()
        .filter(|s| {
            let key = match mode {
                DedupMode::ExactPair => (s.source.trim(), s.target.trim()),
                DedupMode::TargetOnly => ("", s.target.trim()),
            };
            seen.insert(key)
        })
        .cloned()
        .collect();
    corpus.derive(samples)
}

pub fn whitespace_len(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Retains samples within both whitespace-token bounds (inclusive).
pub fn filter_by_length(corpus: &Corpus, max_source_tokens: usize, max_target_tokens: usize) -> Corpus {
    let samples = corpus
        .iter()
        .filter(|s| {
            whitespace_len(&s.source) <= max_source_tokens
                && whitespace_len(&s.target) <= max_target_tokens
        })
        .cloned()
        .collect();
    corpus.derive(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(CorpusError::InvalidSplit(format!(
                "fractions must lie in [0, 1], got {fracs:?}"
            )));
        }
        let total: f64 = fracs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidSplit(format!(
                "fractions sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

// Absorbs representation error such as 0.29 * 100 = 28.999999999999996.
fn floor_frac(n: usize, frac: f64) -> usize {
    ((n as f64 * frac) + 1e-9).floor() as usize
}

/// Seeded shuffle followed by contiguous cuts; the remainder lands in test.
pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<Split, CorpusError> {
    spec.validate()?;
    let mut samples = corpus.samples.clone();
    SplitMix64::new(spec.seed).shuffle(&mut samples);

    let n = samples.len();
    let train_end = floor_frac(n, spec.train_frac).min(n);
    let val_end = floor_frac(n, spec.train_frac + spec.val_frac).clamp(train_end, n);

    let test = samples.split_off(val_end);
    let val = samples.split_off(train_end);
    Ok(Split {
        train: corpus.derive(samples),
        val: corpus.derive(val),
        test: corpus.derive(test),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Source,
    Target,
}

impl std::str::FromStr for Field {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source" => Ok(Field::Source),
            "target" => Ok(Field::Target),
            other => Err(format!("unknown field {other:?}, expected source or target")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    pub bin_width: usize,
    /// Bin lower bound to frequency.
    pub bins: BTreeMap<usize, usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.bins.values().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lower,count\n");
        for (lower, count) in &self.bins {
            out.push_str(&format!("{lower},{count}\n"));
        }
        out
    }
}

impl fmt::Display for Histogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_csv())
    }
}

/// Bins whitespace-token lengths of one field. `bin_width` must be >= 1.
pub fn length_histogram(corpus: &Corpus, field: Field, bin_width: usize) -> Histogram {
    assert!(bin_width >= 1, "bin_width must be positive");
    let mut bins = BTreeMap::new();
    for s in corpus {
        let text = match field {
            Field::Source => &s.source,
            Field::Target => &s.target,
        };
        let len = whitespace_len(text);
        *bins.entry(bin_width * (len / bin_width)).or_insert(0) += 1;
    }
    Histogram { bin_width, bins }
}
