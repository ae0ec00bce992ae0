//! Frequency-ranked, size-capped vocabularies in word or character mode.
//!
//! Index layout is fixed: `PAD=0`, `OOV=1`, `START=2`, `END=3`, then corpus
//! tokens by descending frequency (ties broken by first occurrence).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: usize = 0;
pub const OOV: usize = 1;
pub const START: usize = 2;
pub const END: usize = 3;
pub const NUM_SPECIALS: usize = 4;

pub const OOV_TOKEN: &str = "<unk>";
pub const DEFAULT_MAX_SIZE: usize = 20_000;
pub const DEFAULT_FILTERS: &str = "!\"#$%&()*+,-./:;<=>?@[\\]^_`{|}~\t\n";

#[derive(Error, Debug)]
pub enum TokenizerError {
    #[error("max_size must be at least 5, got {0}")]
    MaxSizeTooSmall(usize),
    #[error("token index {index} out of range for vocabulary of size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("invalid vocabulary: {0}")]
    Invalid(String),
    #[error("vocabulary I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    Word,
    Char,
}

impl std::str::FromStr for TokenMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "word" => Ok(TokenMode::Word),
            "char" => Ok(TokenMode::Char),
            other => Err(format!("unknown token mode {other:?}")),
        }
    }
}

/// Lowercases, replaces filter characters with spaces and splits on whitespace.
pub fn normalize_words(text: &str, filter_set: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if filter_set.contains(c) { ' ' } else { c })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Normalized single-spaced form of `text` under the default word filters.
pub fn normalize_text(text: &str) -> String {
    normalize_words(text, DEFAULT_FILTERS).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    mode: TokenMode,
    max_size: usize,
    filter_set: String,
    /// Non-special tokens; `tokens[i]` has index `i + NUM_SPECIALS`.
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// On-disk form. Specials are implicit.
#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    mode: TokenMode,
    max_size: usize,
    filter_set: String,
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(
        texts: &[S],
        mode: TokenMode,
        max_size: usize,
        filter_set: &str,
    ) -> Result<Self, TokenizerError> {
        if max_size < NUM_SPECIALS + 1 {
            return Err(TokenizerError::MaxSizeTooSmall(max_size));
        }
        // (count, first-occurrence rank) per token.
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
        let mut order = 0usize;
        for text in texts {
            for tok in split_tokens(text.as_ref(), mode, filter_set) {
                let entry = counts.entry(tok).or_insert_with(|| {
                    order += 1;
                    (0, order)
                });
                entry.0 += 1;
            }
        }
        let mut ranked: Vec<(String, (usize, usize))> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        ranked.truncate(max_size - NUM_SPECIALS);
        let tokens = ranked.into_iter().map(|(t, _)| t).collect();
        Self::from_parts(mode, max_size, filter_set.to_string(), tokens)
    }

    fn from_parts(
        mode: TokenMode,
        max_size: usize,
        filter_set: String,
        tokens: Vec<String>,
    ) -> Result<Self, TokenizerError> {
        if max_size < NUM_SPECIALS + 1 {
            return Err(TokenizerError::MaxSizeTooSmall(max_size));
        }
        if tokens.len() + NUM_SPECIALS > max_size {
            return Err(TokenizerError::Invalid(format!(
                "{} tokens exceed max_size {max_size}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i + NUM_SPECIALS).is_some() {
                return Err(TokenizerError::Invalid(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self {
            mode,
            max_size,
            filter_set,
            tokens,
            index,
        })
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn filter_set(&self) -> &str {
        &self.filter_set
    }

    /// Total size including the four specials.
    pub fn len(&self) -> usize {
        self.tokens.len() + NUM_SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        match index {
            PAD => Some("<pad>"),
            OOV => Some(OOV_TOKEN),
            START => Some("<start>"),
            END => Some("<end>"),
            i => self.tokens.get(i - NUM_SPECIALS).map(String::as_str),
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        split_tokens(text, self.mode, &self.filter_set)
    }

    pub fn encode(&self, text: &str, add_bounds: bool) -> Vec<usize> {
        let mut out = Vec::new();
        if add_bounds {
            out.push(START);
        }
        out.extend(
            self.tokenize(text)
                .iter()
                .map(|t| self.index_of(t).unwrap_or(OOV)),
        );
        if add_bounds {
            out.push(END);
        }
        out
    }

    pub fn decode(&self, indices: &[usize]) -> Result<String, TokenizerError> {
        let mut parts: Vec<&str> = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(TokenizerError::IndexOutOfRange { index: i, size: self.len() });
            }
            match i {
                PAD | START | END => {}
                OOV => parts.push(OOV_TOKEN),
                _ => parts.push(&self.tokens[i - NUM_SPECIALS]),
            }
        }
        Ok(match self.mode {
            TokenMode::Word => parts.join(" "),
            TokenMode::Char => parts.concat(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("vocabulary serializes")
    }

    fn to_file(&self) -> VocabularyFile {
        VocabularyFile {
            mode: self.mode,
            max_size: self.max_size,
            filter_set: self.filter_set.clone(),
            tokens: self.tokens.clone(),
        }
    }

    pub fn from_json(json: &str) -> Result<Self, TokenizerError> {
        let file: VocabularyFile = serde_json::from_str(json)?;
        Self::from_parts(file.mode, file.max_size, file.filter_set, file.tokens)
    }

    pub(crate) fn from_value(value: serde_json::Value) -> Result<Self, TokenizerError> {
        let file: VocabularyFile = serde_json::from_value(value)?;
        Self::from_parts(file.mode, file.max_size, file.filter_set, file.tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn split_tokens(text: &str, mode: TokenMode, filter_set: &str) -> Vec<String> {
    match mode {
        TokenMode::Word => normalize_words(text, filter_set),
        TokenMode::Char => text.to_lowercase().chars().map(String::from).collect(),
    }
}

/// Right-pads with `PAD` to `max_len`, truncating longer rows. A truncated row
/// that ended in `END` keeps `END` in its last slot.
pub fn pad_batch(seqs: &[Vec<usize>], max_len: usize) -> Vec<Vec<usize>> {
    assert!(max_len >= 2, "max_len must be at least 2");
    seqs.iter().map(|s| pad_one(s, max_len)).collect()
}

pub fn pad_one(seq: &[usize], max_len: usize) -> Vec<usize> {
    let mut row: Vec<usize> = seq.iter().copied().take(max_len).collect();
    if seq.len() > max_len && seq.last() == Some(&END) {
        row[max_len - 1] = END;
    }
    row.resize(max_len, PAD);
    row
}

/// Truncation without padding, same END rule as [`pad_one`].
pub fn truncate(seq: &[usize], max_len: usize) -> Vec<usize> {
    let mut row: Vec<usize> = seq.iter().copied().take(max_len).collect();
    if seq.len() > max_len && seq.last() == Some(&END) {
        row[max_len - 1] = END;
    }
    row
}
