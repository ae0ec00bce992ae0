//! BLEU and ROUGE-{1,2,3,4,L,W} over whitespace tokens.
//!
//! Every scorer is generic over the token type so callers can score string
//! slices or integer ids alike. Empty candidates score zero.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MAX_N: usize = 4;
pub const ROUGE_W_ALPHA: f64 = 1.2;
/// Replacement for a zero n-gram precision under [`BleuMode::AddEpsilon`].
pub const BLEU_EPSILON: f64 = 1e-9;

/// Report keys in canonical column order.
pub const ROUGE_KEYS: [&str; 6] = ["rouge-1", "rouge-2", "rouge-3", "rouge-4", "rouge-l", "rouge-w"];

#[derive(Error, Debug, PartialEq)]
pub enum MetricError {
    #[error("no references given")]
    NoReferences,
    #[error("n-gram order must be at least 1")]
    ZeroOrder,
    #[error("rouge-w alpha must exceed 1, got {0}")]
    BadAlpha(f64),
    #[error("nothing to evaluate")]
    Empty,
}

type Result<T> = std::result::Result<T, MetricError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuMode {
    /// Any zero precision zeroes the score.
    CorpusZero,
    /// Zero precisions are replaced by [`BLEU_EPSILON`].
    #[default]
    AddEpsilon,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrfScore {
    pub f: f64,
    pub p: f64,
    pub r: f64,
}

impl PrfScore {
    pub fn from_pr(p: f64, r: f64) -> Self {
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        Self { f, p, r }
    }

    /// `num / den` for each side, zero when a denominator is zero.
    fn from_counts(hits: f64, cand_total: usize, ref_total: usize) -> Self {
        let ratio = |den: usize| if den == 0 { 0.0 } else { hits / den as f64 };
        Self::from_pr(ratio(cand_total), ratio(ref_total))
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

fn ngram_total(len: usize, n: usize) -> usize {
    (len + 1).saturating_sub(n)
}

/// Candidate n-grams clipped by their maximum count in any reference.
/// Returns `(clipped_matches, total)`.
pub fn modified_precision<T: Eq + Hash>(cand: &[T], refs: &[&[T]], n: usize) -> Result<(usize, usize)> {
    if n == 0 {
        return Err(MetricError::ZeroOrder);
    }
    let cand_counts = ngram_counts(cand, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in refs {
        for (gram, c) in ngram_counts(r, n) {
            let slot = max_ref.entry(gram).or_insert(0);
            *slot = (*slot).max(c);
        }
    }
    let clipped = cand_counts
        .iter()
        .map(|(gram, &c)| c.min(max_ref.get(gram).copied().unwrap_or(0)))
        .sum();
    Ok((clipped, ngram_total(cand.len(), n)))
}

/// Reference length closest to `c`, ties going to the shorter one.
pub fn closest_ref_len(c: usize, ref_lens: impl IntoIterator<Item = usize>) -> Option<usize> {
    ref_lens
        .into_iter()
        .min_by_key(|&r| (r.abs_diff(c), r))
}

pub fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Combines per-order `(matches, total)` counts into a BLEU score. Orders
/// with no candidate n-grams are left out and the weights renormalized, so a
/// short candidate identical to its reference still scores 1.
fn combine(counts: &[(usize, usize)], c: usize, r: usize, mode: BleuMode) -> f64 {
    let used: Vec<(usize, usize)> = counts.iter().copied().filter(|&(_, t)| t > 0).collect();
    if c == 0 || used.is_empty() {
        return 0.0;
    }
    let weight = 1.0 / used.len() as f64;
    let mut log_sum = 0.0;
    for (m, t) in used {
        let p = if m == 0 {
            match mode {
                BleuMode::CorpusZero => return 0.0,
                BleuMode::AddEpsilon => BLEU_EPSILON,
            }
        } else {
            m as f64 / t as f64
        };
        log_sum += weight * p.ln();
    }
    brevity_penalty(c, r) * log_sum.exp()
}

pub fn bleu<T: Eq + Hash>(cand: &[T], refs: &[&[T]], max_n: usize, mode: BleuMode) -> Result<f64> {
    if refs.is_empty() {
        return Err(MetricError::NoReferences);
    }
    if max_n == 0 {
        return Err(MetricError::ZeroOrder);
    }
    let counts = (1..=max_n)
        .map(|n| modified_precision(cand, refs, n))
        .collect::<Result<Vec<_>>>()?;
    let r = closest_ref_len(cand.len(), refs.iter().map(|r| r.len())).expect("refs non-empty");
    Ok(combine(&counts, cand.len(), r, mode))
}

/// Corpus-level BLEU: clipped counts, candidate lengths and closest reference
/// lengths are summed over all segments before combining.
pub fn corpus_bleu<T: Eq + Hash>(segments: &[(&[T], Vec<&[T]>)], max_n: usize, mode: BleuMode) -> Result<f64> {
    if segments.is_empty() {
        return Err(MetricError::Empty);
    }
    if max_n == 0 {
        return Err(MetricError::ZeroOrder);
    }
    let mut counts = vec![(0usize, 0usize); max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, refs) in segments {
        if refs.is_empty() {
            return Err(MetricError::NoReferences);
        }
        for (n, slot) in counts.iter_mut().enumerate() {
            let (m, t) = modified_precision(cand, refs, n + 1)?;
            slot.0 += m;
            slot.1 += t;
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), refs.iter().map(|r| r.len())).expect("refs non-empty");
    }
    Ok(combine(&counts, c, r, mode))
}

pub fn rouge_n<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> Result<PrfScore> {
    if n == 0 {
        return Err(MetricError::ZeroOrder);
    }
    let cc = ngram_counts(cand, n);
    let rc = ngram_counts(reference, n);
    let overlap: usize = cc
        .iter()
        .map(|(gram, &c)| c.min(rc.get(gram).copied().unwrap_or(0)))
        .sum();
    Ok(PrfScore::from_counts(
        overlap as f64,
        ngram_total(cand.len(), n),
        ngram_total(reference.len(), n),
    ))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: PartialEq>(cand: &[T], reference: &[T]) -> PrfScore {
    PrfScore::from_counts(lcs_len(cand, reference) as f64, cand.len(), reference.len())
}

/// Weighted LCS with weight `k^alpha` for a run of `k` consecutive matches.
pub fn wlcs<T: PartialEq>(a: &[T], b: &[T], alpha: f64) -> f64 {
    let f = |k: usize| (k as f64).powf(alpha);
    let cols = b.len() + 1;
    let mut score = vec![0.0f64; (a.len() + 1) * cols];
    let mut run = vec![0usize; (a.len() + 1) * cols];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let here = i * cols + j;
            if a[i - 1] == b[j - 1] {
                let diag = (i - 1) * cols + (j - 1);
                let k = run[diag];
                score[here] = score[diag] + f(k + 1) - f(k);
                run[here] = k + 1;
            } else {
                let up = score[(i - 1) * cols + j];
                let left = score[i * cols + j - 1];
                score[here] = if up > left { up } else { left };
                run[here] = 0;
            }
        }
    }
    score[a.len() * cols + b.len()]
}

pub fn rouge_w<T: PartialEq>(cand: &[T], reference: &[T], alpha: f64) -> Result<PrfScore> {
    if !(alpha > 1.0) {
        return Err(MetricError::BadAlpha(alpha));
    }
    if cand.is_empty() || reference.is_empty() {
        return Ok(PrfScore::default());
    }
    let w = wlcs(cand, reference, alpha);
    let side = |len: usize| (w / (len as f64).powf(alpha)).powf(1.0 / alpha);
    Ok(PrfScore::from_pr(side(cand.len()), side(reference.len())))
}

/// All six ROUGE variants for one pair, keyed as in [`ROUGE_KEYS`].
pub fn rouge_all<T: Eq + Hash>(cand: &[T], reference: &[T]) -> BTreeMap<String, PrfScore> {
    let mut out = BTreeMap::new();
    for n in 1..=4 {
        out.insert(format!("rouge-{n}"), rouge_n(cand, reference, n).expect("order >= 1"));
    }
    out.insert("rouge-l".into(), rouge_l(cand, reference));
    out.insert(
        "rouge-w".into(),
        rouge_w(cand, reference, ROUGE_W_ALPHA).expect("default alpha is valid"),
    );
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub rouge: BTreeMap<String, PrfScore>,
    pub n_samples: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Variant names across the top, then one row each for f, p and r.
    pub fn to_table(&self) -> String {
        let mut out = String::from(" ");
        for key in ROUGE_KEYS {
            let _ = write!(out, " {key:>7}");
        }
        out.push('\n');
        for (label, pick) in [("f", 0usize), ("p", 1), ("r", 2)] {
            out.push_str(label);
            for key in ROUGE_KEYS {
                let s = self.rouge.get(key).copied().unwrap_or_default();
                let v = [s.f, s.p, s.r][pick];
                let _ = write!(out, " {v:>7.4}");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "bleu {:.4}  samples {}", self.bleu, self.n_samples);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuAggregate {
    /// Mean of sentence-level scores in [`BleuMode::AddEpsilon`] mode.
    #[default]
    SentenceMean,
    /// One corpus-level score in [`BleuMode::CorpusZero`] mode.
    Corpus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    pub bleu: f64,
    pub rouge: BTreeMap<String, PrfScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub per_sample: Vec<SampleScore>,
}

/// Scores `(predicted, reference)` pairs of whitespace-tokenized text.
pub fn evaluate_corpus<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<Evaluation> {
    evaluate_corpus_with(pairs, BleuAggregate::SentenceMean)
}

pub fn evaluate_corpus_with<S: AsRef<str>>(pairs: &[(S, S)], aggregate: BleuAggregate) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    let tokenized: Vec<(Vec<&str>, Vec<&str>)> = pairs
        .iter()
        .map(|(p, r)| (p.as_ref().split_whitespace().collect(), r.as_ref().split_whitespace().collect()))
        .collect();

    let mut per_sample = Vec::with_capacity(pairs.len());
    for (pred, reference) in &tokenized {
        per_sample.push(SampleScore {
            bleu: bleu(pred, &[reference.as_slice()], DEFAULT_MAX_N, BleuMode::AddEpsilon)?,
            rouge: rouge_all(pred, reference),
        });
    }

    let n = per_sample.len() as f64;
    let mut rouge = BTreeMap::new();
    for key in ROUGE_KEYS {
        let mut sum = PrfScore::default();
        for s in &per_sample {
            let x = s.rouge[key];
            sum.f += x.f;
            sum.p += x.p;
            sum.r += x.r;
        }
        rouge.insert(
            key.to_string(),
            PrfScore {
                f: sum.f / n,
                p: sum.p / n,
                r: sum.r / n,
            },
        );
    }
    let bleu_score = match aggregate {
        BleuAggregate::SentenceMean => per_sample.iter().map(|s| s.bleu).sum::<f64>() / n,
        BleuAggregate::Corpus => {
            let segments: Vec<(&[&str], Vec<&[&str]>)> = tokenized
                .iter()
                .map(|(p, r)| (p.as_slice(), vec![r.as_slice()]))
                .collect();
            corpus_bleu(&segments, DEFAULT_MAX_N, BleuMode::CorpusZero)?
        }
    };
    Ok(Evaluation {
        report: MetricReport {
            bleu: bleu_score,
            rouge,
            n_samples: pairs.len(),
        },
        per_sample,
    })
}

fn csv_quoted(field: &str) -> String {
    format!("\"{}\"", field.replace('"', "\"\""))
}

/// `id,original,predicted` listing; text fields are always quoted.
pub fn comparison_csv<S: AsRef<str>>(rows: &[(S, S, S)]) -> String {
    let mut out = String::from("id,original,predicted\n");
    for (id, original, predicted) in rows {
        let id = id.as_ref();
        let id = if id.contains([',', '"', '\n', '\r']) {
            csv_quoted(id)
        } else {
            id.to_string()
        };
        let _ = writeln!(out, "{id},{},{}", csv_quoted(original.as_ref()), csv_quoted(predicted.as_ref()));
    }
    out
}
