//! Brute-force reference implementations of the text metrics. Deliberately
//! naive: linear scans instead of hash maps, top-down recursion instead of
//! tables, products instead of log sums.

use std::collections::HashMap;

fn grams(seq: &[u8], n: usize) -> Vec<Vec<u8>> {
    if seq.len() < n {
        return Vec::new();
    }
    (0..=seq.len() - n).map(|i| seq[i..i + n].to_vec()).collect()
}

fn occurrences(haystack: &[Vec<u8>], needle: &[u8]) -> usize {
    haystack.iter().filter(|g| g.as_slice() == needle).count()
}

fn distinct(all: &[Vec<u8>]) -> Vec<Vec<u8>> {
    let mut out: Vec<Vec<u8>> = Vec::new();
    for g in all {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn clipped(cand: &[u8], refs: &[&[u8]], n: usize) -> (usize, usize) {
    let cg = grams(cand, n);
    let mut hits = 0;
    for g in distinct(&cg) {
        let in_cand = occurrences(&cg, &g);
        let best_ref = refs.iter().map(|r| occurrences(&grams(r, n), &g)).max().unwrap_or(0);
        hits += in_cand.min(best_ref);
    }
    (hits, cg.len())
}

/// Orders with no candidate n-grams are excluded, the rest weighted equally.
pub fn bleu(cand: &[u8], refs: &[&[u8]], max_n: usize, epsilon: Option<f64>) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut precisions = Vec::new();
    for n in 1..=max_n {
        let (hits, total) = clipped(cand, refs, n);
        if total == 0 {
            continue;
        }
        if hits == 0 {
            match epsilon {
                Some(e) => precisions.push(e),
                None => return 0.0,
            }
        } else {
            precisions.push(hits as f64 / total as f64);
        }
    }
    if precisions.is_empty() {
        return 0.0;
    }
    let c = cand.len();
    let mut best = refs[0].len();
    for r in refs {
        let (d, bd) = (r.len().abs_diff(c), best.abs_diff(c));
        if d < bd || (d == bd && r.len() < best) {
            best = r.len();
        }
    }
    let bp = if c > best { 1.0 } else { (1.0 - best as f64 / c as f64).exp() };
    let k = precisions.len() as f64;
    bp * precisions.iter().map(|p| p.powf(1.0 / k)).product::<f64>()
}

fn prf(p: f64, r: f64) -> (f64, f64, f64) {
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

pub fn rouge_n(cand: &[u8], reference: &[u8], n: usize) -> (f64, f64, f64) {
    let (hits, total) = clipped(cand, &[reference], n);
    let ref_total = grams(reference, n).len();
    let p = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    let r = if ref_total == 0 { 0.0 } else { hits as f64 / ref_total as f64 };
    prf(p, r)
}

fn lcs(a: &[u8], b: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let key = (a.len(), b.len());
    if let Some(&v) = memo.get(&key) {
        return v;
    }
    let v = if a[a.len() - 1] == b[b.len() - 1] {
        1 + lcs(&a[..a.len() - 1], &b[..b.len() - 1], memo)
    } else {
        lcs(&a[..a.len() - 1], b, memo).max(lcs(a, &b[..b.len() - 1], memo))
    };
    memo.insert(key, v);
    v
}

pub fn rouge_l(cand: &[u8], reference: &[u8]) -> (f64, f64, f64) {
    if cand.is_empty() || reference.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let l = lcs(cand, reference, &mut HashMap::new()) as f64;
    prf(l / cand.len() as f64, l / reference.len() as f64)
}

/// Weighted LCS of prefixes `a[..i]`, `b[..j]`, returned with the length of
/// the consecutive run ending at `(i, j)`.
fn wlcs(a: &[u8], b: &[u8], i: usize, j: usize, alpha: f64, memo: &mut HashMap<(usize, usize), (f64, usize)>) -> (f64, usize) {
    if i == 0 || j == 0 {
        return (0.0, 0);
    }
    if let Some(&v) = memo.get(&(i, j)) {
        return v;
    }
    let v = if a[i - 1] == b[j - 1] {
        let (s, k) = wlcs(a, b, i - 1, j - 1, alpha, memo);
        let w = |x: usize| (x as f64).powf(alpha);
        (s + w(k + 1) - w(k), k + 1)
    } else {
        let up = wlcs(a, b, i - 1, j, alpha, memo).0;
        let left = wlcs(a, b, i, j - 1, alpha, memo).0;
        (if up > left { up } else { left }, 0)
    };
    memo.insert((i, j), v);
    v
}

pub fn rouge_w(cand: &[u8], reference: &[u8], alpha: f64) -> (f64, f64, f64) {
    if cand.is_empty() || reference.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let s = wlcs(cand, reference, cand.len(), reference.len(), alpha, &mut HashMap::new()).0;
    let inv = |len: usize| (s / (len as f64).powf(alpha)).powf(1.0 / alpha);
    prf(inv(cand.len()), inv(reference.len()))
}
