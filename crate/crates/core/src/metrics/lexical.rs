use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};
use crate::text::tokenize;

fn ngram_counts<T: Hash + Eq + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.to_vec()).or_insert(0) += 1;
    }
    counts
}

/// Clipped matches and candidate total for one order.
fn clipped<T: Hash + Eq + Clone>(cand: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matches = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, cand.len().saturating_sub(n - 1))
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    }
}

pub(crate) fn check_corpus<S>(candidates: &[S], references: &[S]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Contract("empty candidate set".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::dims(
            "corpus",
            &[candidates.len()],
            &[references.len()],
        ));
    }
    Ok(())
}

/// Pooled per-order counts for BLEU-style scores.
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct PooledCounts {
    pub matches: [f64; 4],
    pub totals: [f64; 4],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl PooledCounts {
    pub fn merge(&mut self, other: &PooledCounts) {
        for i in 0..4 {
            self.matches[i] += other.matches[i];
            self.totals[i] += other.totals[i];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    pub fn score(&self) -> f64 {
        let log_sum: f64 = (0..4)
            .map(|i| ((self.matches[i] + 1.0) / (self.totals[i] + 1.0)).ln())
            .sum();
        brevity_penalty(self.cand_len, self.ref_len) * (log_sum / 4.0).exp()
    }
}

pub(crate) fn bleu_counts(cand: &[String], reference: &[String], acc: &mut PooledCounts) {
    for n in 1..=4 {
        let (m, t) = clipped(cand, reference, n);
        acc.matches[n - 1] += m as f64;
        acc.totals[n - 1] += t as f64;
    }
    acc.cand_len += cand.len();
    acc.ref_len += reference.len();
}

/// Corpus BLEU-4 with add-one smoothed precisions and pooled counts.
pub fn bleu4<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let mut acc = PooledCounts::default();
    for (c, r) in candidates.iter().zip(references) {
        bleu_counts(&tokenize(c.as_ref()), &tokenize(r.as_ref()), &mut acc);
    }
    Ok(acc.score())
}

/// Sentence-level BLEU-4 (a corpus of one).
pub fn sentence_bleu4(candidate: &str, reference: &str) -> f64 {
    let mut acc = PooledCounts::default();
    bleu_counts(&tokenize(candidate), &tokenize(reference), &mut acc);
    acc.score()
}

/// Character n-gram F-score over whitespace-free text.
///
/// Precision and recall are averaged over the orders `1..=max_n` for which
/// either side has n-grams; a side without n-grams of an order scores 0 there.
pub fn chrf(candidate: &str, reference: &str, max_n: usize, beta: f64) -> f64 {
    let c: Vec<char> = candidate.chars().filter(|ch| !ch.is_whitespace()).collect();
    let r: Vec<char> = reference.chars().filter(|ch| !ch.is_whitespace()).collect();
    if r.is_empty() {
        log::warn!("chrf: empty reference scored 0");
        return 0.0;
    }
    let (mut p_sum, mut r_sum, mut orders) = (0.0, 0.0, 0usize);
    for n in 1..=max_n {
        let (m, c_total) = clipped(&c, &r, n);
        let r_total = r.len().saturating_sub(n - 1);
        if c_total == 0 && r_total == 0 {
            continue;
        }
        orders += 1;
        if c_total > 0 {
            p_sum += m as f64 / c_total as f64;
        }
        if r_total > 0 {
            r_sum += m as f64 / r_total as f64;
        }
    }
    let p = p_sum / orders as f64;
    let rec = r_sum / orders as f64;
    let b2 = beta * beta;
    if p + rec == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * rec / (b2 * p + rec)
    }
}

pub fn chrf_default(candidate: &str, reference: &str) -> f64 {
    chrf(candidate, reference, 6, 2.0)
}

pub(crate) fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 over tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&c, &r) as f64;
    let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
    if p + rec == 0.0 {
        0.0
    } else {
        2.0 * p * rec / (p + rec)
    }
}

/// Suffixes stripped by [`stem`], longest first; `ies` becomes `y`.
pub const SUFFIXES: [(&str, &str); 9] = [
    ("ingly", ""),
    ("edly", ""),
    ("ing", ""),
    ("ies", "y"),
    ("est", ""),
    ("ed", ""),
    ("ly", ""),
    ("er", ""),
    ("s", ""),
];

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u')
}

/// Lower-cases and strips the first matching suffix from [`SUFFIXES`] when at
/// least two characters remain, then undoubles a trailing consonant pair.
pub fn stem(word: &str) -> String {
    let w = word.to_lowercase();
    for (suffix, replacement) in SUFFIXES {
        if suffix == "s" && (w.ends_with("ss") || w.ends_with("us")) {
            continue;
        }
        if let Some(base) = w.strip_suffix(suffix) {
            if base.chars().count() < 2 {
                continue;
            }
            let mut out: Vec<char> = base.chars().collect();
            let n = out.len();
            if replacement.is_empty()
                && n >= 3
                && out[n - 1] == out[n - 2]
                && !is_vowel(out[n - 1])
                && out[n - 1].is_alphabetic()
            {
                out.pop();
            }
            let mut s: String = out.into_iter().collect();
            s.push_str(replacement);
            return s;
        }
    }
    w
}

/// Unigram alignment: exact matches first, then stem matches, each pairing a
/// candidate token with the leftmost free reference token. Returns
/// `(candidate index, reference index)` pairs sorted by candidate index.
pub fn meteor_alignment(cand: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let lower = |v: &[String]| v.iter().map(|s| s.to_lowercase()).collect::<Vec<_>>();
    let (cl, rl) = (lower(cand), lower(reference));
    let mut ref_used = vec![false; reference.len()];
    let mut cand_used = vec![false; cand.len()];
    let mut pairs = Vec::new();
    for (i, c) in cl.iter().enumerate() {
        if let Some(j) = (0..rl.len()).find(|&j| !ref_used[j] && &rl[j] == c) {
            ref_used[j] = true;
            cand_used[i] = true;
            pairs.push((i, j));
        }
    }
    let cs: Vec<String> = cl.iter().map(|s| stem(s)).collect();
    let rs: Vec<String> = rl.iter().map(|s| stem(s)).collect();
    for i in 0..cand.len() {
        if cand_used[i] {
            continue;
        }
        if let Some(j) = (0..rs.len()).find(|&j| !ref_used[j] && rs[j] == cs[i]) {
            ref_used[j] = true;
            cand_used[i] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Number of maximal runs of alignments contiguous in both sequences.
pub fn chunk_count(pairs: &[(usize, usize)]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for &(i, j) in pairs {
        match prev {
            Some((pi, pj)) if i == pi + 1 && j == pj + 1 => {}
            _ => chunks += 1,
        }
        prev = Some((i, j));
    }
    chunks
}

/// METEOR without the synonym stage.
pub fn meteor_lite(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    let pairs = meteor_alignment(&c, &r);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let f_mean = 10.0 * p * rec / (rec + 9.0 * p);
    let frag = chunk_count(&pairs) as f64 / m as f64;
    f_mean * (1.0 - 0.5 * frag.powi(3))
}
