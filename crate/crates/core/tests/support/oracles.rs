//! Brute-force reference implementations used by the acceptance test.

use ddpt_core::metrics::{parse_mini, MiniAst, KEYWORDS};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn count_in<T: PartialEq>(hay: &[T], gram: &[T]) -> usize {
    if gram.len() > hay.len() {
        return 0;
    }
    (0..=hay.len() - gram.len())
        .filter(|&i| &hay[i..i + gram.len()] == gram)
        .count()
}

/// Clipped matches and candidate n-gram total, by rescanning both sides for
/// every distinct candidate n-gram.
fn clip<T: PartialEq + Clone>(
    c: &[T],
    r: &[T],
    n: usize,
    weight: impl Fn(&[T]) -> f64,
) -> (f64, f64) {
    if c.len() < n {
        return (0.0, 0.0);
    }
    let mut seen: Vec<Vec<T>> = Vec::new();
    let (mut m, mut t) = (0.0, 0.0);
    for i in 0..=c.len() - n {
        let g = c[i..i + n].to_vec();
        if seen.contains(&g) {
            continue;
        }
        let in_c = count_in(c, &g);
        m += weight(&g) * in_c.min(count_in(r, &g)) as f64;
        t += weight(&g) * in_c as f64;
        seen.push(g);
    }
    (m, t)
}

fn bleu_weighted(cands: &[String], refs: &[String], unigram_weight: &dyn Fn(&str) -> f64) -> f64 {
    let (mut ms, mut ts) = ([0.0; 4], [0.0; 4]);
    let (mut cl, mut rl) = (0.0, 0.0);
    for (c, r) in cands.iter().zip(refs) {
        let (c, r) = (words(c), words(r));
        for n in 1..=4 {
            let (m, t) = if n == 1 {
                clip(&c, &r, 1, |g| unigram_weight(g[0]))
            } else {
                clip(&c, &r, n, |_| 1.0)
            };
            ms[n - 1] += m;
            ts[n - 1] += t;
        }
        cl += c.len() as f64;
        rl += r.len() as f64;
    }
    let log_p: f64 = (0..4)
        .map(|n| ((ms[n] + 1.0) / (ts[n] + 1.0)).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if cl == 0.0 {
        0.0
    } else if cl < rl {
        (1.0 - rl / cl).exp()
    } else {
        1.0
    };
    bp * log_p.exp()
}

pub fn bleu(cands: &[String], refs: &[String]) -> f64 {
    bleu_weighted(cands, refs, &|_| 1.0)
}

pub fn chrf(c: &str, r: &str) -> f64 {
    let c: Vec<char> = c.chars().filter(|x| !x.is_whitespace()).collect();
    let r: Vec<char> = r.chars().filter(|x| !x.is_whitespace()).collect();
    if r.is_empty() {
        return 0.0;
    }
    let (mut ps, mut rs, mut k) = (0.0, 0.0, 0.0);
    for n in 1..=6 {
        let (m, ct) = clip(&c, &r, n, |_| 1.0);
        let rt = r.len().saturating_sub(n - 1) as f64;
        if ct == 0.0 && rt == 0.0 {
            continue;
        }
        k += 1.0;
        ps += if ct > 0.0 { m / ct } else { 0.0 };
        rs += if rt > 0.0 { m / rt } else { 0.0 };
    }
    let (p, rec) = (ps / k, rs / k);
    if p + rec == 0.0 {
        0.0
    } else {
        5.0 * p * rec / (4.0 * p + rec)
    }
}

fn is_subsequence(sub: &[&str], of: &[&str]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|s| it.any(|o| o == s))
}

/// LCS by enumerating every candidate subsequence.
pub fn rouge_l(c: &str, r: &str) -> f64 {
    let (c, r) = (words(c), words(r));
    let mut best = 0;
    for mask in 0u32..(1 << c.len()) {
        let sub: Vec<&str> = (0..c.len())
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| c[i])
            .collect();
        if sub.len() > best && is_subsequence(&sub, &r) {
            best = sub.len();
        }
    }
    if best == 0 {
        return 0.0;
    }
    let (p, rec) = (best as f64 / c.len() as f64, best as f64 / r.len() as f64);
    2.0 * p * rec / (p + rec)
}

/// Words with their stems worked out by hand from the suffix rules.
pub const STEMMED: [(&str, &str); 16] = [
    ("run", "run"),
    ("running", "run"),
    ("runs", "run"),
    ("jump", "jump"),
    ("jumped", "jump"),
    ("jumping", "jump"),
    ("cat", "cat"),
    ("cats", "cat"),
    ("tries", "try"),
    ("try", "try"),
    ("happily", "happi"),
    ("happy", "happy"),
    ("sum", "sum"),
    ("sums", "sum"),
    ("the", "the"),
    ("a", "a"),
];

fn hand_stem(w: &str) -> &'static str {
    STEMMED.iter().find(|(k, _)| *k == w).unwrap().1
}

pub fn meteor(c: &str, r: &str) -> f64 {
    let (c, r) = (words(c), words(r));
    let mut used = vec![false; r.len()];
    let mut align: Vec<Option<usize>> = vec![None; c.len()];
    for exact in [true, false] {
        for i in 0..c.len() {
            if align[i].is_some() {
                continue;
            }
            let hit = |j: usize| {
                if exact {
                    c[i] == r[j]
                } else {
                    hand_stem(c[i]) == hand_stem(r[j])
                }
            };
            if let Some(j) = (0..r.len()).find(|&j| !used[j] && hit(j)) {
                used[j] = true;
                align[i] = Some(j);
            }
        }
    }
    let m = align.iter().flatten().count();
    if m == 0 {
        return 0.0;
    }
    let joined = align
        .windows(2)
        .filter(|w| matches!((w[0], w[1]), (Some(a), Some(b)) if b == a + 1))
        .count();
    let chunks = (m - joined) as f64;
    let (p, rec) = (m as f64 / c.len() as f64, m as f64 / r.len() as f64);
    let f = 10.0 * p * rec / (rec + 9.0 * p);
    f * (1.0 - 0.5 * (chunks / m as f64).powi(3))
}

/// Every subtree serialized as nested kinds, by an explicit stack walk.
fn subtrees(ast: &MiniAst) -> Vec<String> {
    fn ser(n: &MiniAst) -> String {
        let kids: Vec<String> = n.children.iter().map(ser).collect();
        format!("{:?}<{}>", n.kind, kids.join("|"))
    }
    let mut out = Vec::new();
    let mut stack = vec![ast];
    while let Some(n) = stack.pop() {
        out.push(ser(n));
        stack.extend(n.children.iter());
    }
    out
}

fn ast_match(cands: &[String], refs: &[String]) -> f64 {
    let (mut hits, mut total) = (0.0, 0.0);
    for (c, r) in cands.iter().zip(refs) {
        let Ok(r) = parse_mini(r) else { continue };
        let rs = subtrees(&r);
        total += rs.len() as f64;
        if let Ok(c) = parse_mini(c) {
            let cs = subtrees(&c);
            hits += rs.iter().filter(|k| cs.contains(k)).count() as f64;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        hits / total
    }
}

pub fn codebleu(cands: &[String], refs: &[String]) -> f64 {
    let kw = |w: &str| if KEYWORDS.contains(&w) { 4.0 } else { 1.0 };
    (bleu(cands, refs) + bleu_weighted(cands, refs, &kw) + ast_match(cands, refs)) / 3.0
}

pub fn rand_text(rng: &mut ChaCha8Rng, vocab: &[&str], lo: usize, hi: usize) -> String {
    let n = rng.random_range(lo..=hi);
    (0..n)
        .map(|_| *vocab.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn rand_atom(rng: &mut ChaCha8Rng, depth: usize) -> String {
    match rng.random_range(0..if depth == 0 { 2 } else { 5 }) {
        0 => ["a", "b", "x", "total"].choose(rng).unwrap().to_string(),
        1 => rng.random_range(0..10).to_string(),
        2 => format!("- {}", rand_atom(rng, depth - 1)),
        3 => {
            let args: Vec<String> = (0..rng.random_range(0..3))
                .map(|_| rand_expr(rng, depth - 1))
                .collect();
            format!(
                "{} ( {} )",
                ["f", "len", "print"].choose(rng).unwrap(),
                args.join(" , ")
            )
        }
        _ => format!("( {} )", rand_expr(rng, depth - 1)),
    }
}

fn rand_arith(rng: &mut ChaCha8Rng, depth: usize) -> String {
    let mut s = rand_atom(rng, depth);
    for _ in 0..rng.random_range(0..3) {
        let op = ["+", "-", "*", "/", "%"].choose(rng).unwrap();
        s = format!("{s} {op} {}", rand_atom(rng, depth));
    }
    s
}

fn rand_expr(rng: &mut ChaCha8Rng, depth: usize) -> String {
    let lhs = rand_arith(rng, depth);
    if rng.random_bool(0.3) {
        let op = ["==", "!=", "<", "<=", ">", ">="].choose(rng).unwrap();
        format!("{lhs} {op} {}", rand_arith(rng, depth))
    } else {
        lhs
    }
}

fn rand_simple(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..4) {
        0 => "return".into(),
        1 => format!("return {}", rand_expr(rng, 2)),
        2 => format!(
            "{} = {}",
            ["a", "y", "total"].choose(rng).unwrap(),
            rand_expr(rng, 2)
        ),
        _ => rand_expr(rng, 2),
    }
}

/// A random well-formed mini-language program with space-separated tokens.
pub fn rand_program(rng: &mut ChaCha8Rng) -> String {
    let stmts: Vec<String> = (0..rng.random_range(1..=3))
        .map(|_| {
            if rng.random_bool(0.3) {
                let mut s = format!("if {} : {}", rand_expr(rng, 1), rand_simple(rng));
                if rng.random_bool(0.5) {
                    s.push_str(&format!(" else : {}", rand_simple(rng)));
                }
                s
            } else {
                rand_simple(rng)
            }
        })
        .collect();
    stmts.join(" ; ")
}

/// Cosine ranking by full sort: best first, ties by ascending id.
pub fn nearest(query: &[f64], rows: &[Vec<f64>], skip: usize, k: usize) -> Vec<(usize, f64)> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut all: Vec<(usize, f64)> = rows
        .iter()
        .enumerate()
        .skip(skip)
        .map(|(i, r)| {
            let dot: f64 = r.iter().zip(query).map(|(a, b)| a * b).sum();
            (i, dot / (norm(r) * norm(query)))
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}
