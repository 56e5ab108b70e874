use std::collections::{HashMap, HashSet};

use super::lexical::{bleu_counts, check_corpus, PooledCounts};
use super::mini::parse_mini;
use crate::error::Result;
use crate::text::tokenize;

/// Reserved words of the mini-language; weighted n-gram match favours them.
pub const KEYWORDS: [&str; 11] = [
    "if", "else", "return", "print", "len", "and", "or", "not", "True", "False", "None",
];

pub const KEYWORD_WEIGHT: f64 = 4.0;

/// The three CodeBLEU-lite components, each in [0,1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodeBleuParts {
    pub bleu: f64,
    pub weighted_bleu: f64,
    pub ast_match: f64,
}

impl CodeBleuParts {
    pub fn score(&self) -> f64 {
        (self.bleu + self.weighted_bleu + self.ast_match) / 3.0
    }
}

/// Unigram matches and totals weighted by keyword membership.
fn weighted_unigrams(
    cand: &[String],
    reference: &[String],
    keywords: &HashSet<&str>,
) -> (f64, f64) {
    let weight = |t: &str| {
        if keywords.contains(t) {
            KEYWORD_WEIGHT
        } else {
            1.0
        }
    };
    let mut r_counts: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *r_counts.entry(t).or_insert(0) += 1;
    }
    let mut c_counts: HashMap<&str, usize> = HashMap::new();
    for t in cand {
        *c_counts.entry(t).or_insert(0) += 1;
    }
    let (mut m, mut total) = (0.0, 0.0);
    for (t, &k) in &c_counts {
        let w = weight(t);
        m += w * k.min(r_counts.get(t).copied().unwrap_or(0)) as f64;
        total += w * k as f64;
    }
    (m, total)
}

/// Corpus CodeBLEU-lite components. A candidate that fails to parse
/// contributes no AST matches; references that fail to parse are left out of
/// the AST pool.
pub fn codebleu_parts<S: AsRef<str>>(
    candidates: &[S],
    references: &[S],
    keywords: &[&str],
) -> Result<CodeBleuParts> {
    check_corpus(candidates, references)?;
    let kw: HashSet<&str> = keywords.iter().copied().collect();
    let mut plain = PooledCounts::default();
    let mut weighted = PooledCounts::default();
    let (mut ast_hits, mut ast_total) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let (ct, rt) = (tokenize(c.as_ref()), tokenize(r.as_ref()));
        bleu_counts(&ct, &rt, &mut plain);
        let mut w = PooledCounts::default();
        bleu_counts(&ct, &rt, &mut w);
        let (wm, wt) = weighted_unigrams(&ct, &rt, &kw);
        w.matches[0] = wm;
        w.totals[0] = wt;
        weighted.merge(&w);

        let Ok(ref_ast) = parse_mini(r.as_ref()) else {
            continue;
        };
        let ref_keys = ref_ast.subtree_keys();
        ast_total += ref_keys.len();
        if let Ok(cand_ast) = parse_mini(c.as_ref()) {
            let cand_keys: HashSet<String> = cand_ast.subtree_keys().into_iter().collect();
            ast_hits += ref_keys.iter().filter(|k| cand_keys.contains(*k)).count();
        }
    }
    let ast_match = if ast_total == 0 {
        0.0
    } else {
        ast_hits as f64 / ast_total as f64
    };
    Ok(CodeBleuParts {
        bleu: plain.score(),
        weighted_bleu: weighted.score(),
        ast_match,
    })
}

/// BLEU-4, keyword-weighted BLEU-4 and AST subtree match, equally weighted.
pub fn codebleu_lite<S: AsRef<str>>(
    candidates: &[S],
    references: &[S],
    keywords: &[&str],
) -> Result<f64> {
    Ok(codebleu_parts(candidates, references, keywords)?.score())
}
