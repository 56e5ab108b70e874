//! Corpus records, prompt samples and the synthetic instruction→code generator.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, EOS, PAD};
use crate::error::{Error, Result};

/// Manual prompt context, taken from the CodeAlpaca instruction template.
pub const DEFAULT_CONTEXT: &str =
    "Below is an instruction that describes a task. Write a response that appropriately completes the request.";

/// One JSONL line of an instruction dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub instruction: String,
    pub output: String,
}

impl CorpusRecord {
    pub fn context_or_default(&self) -> &str {
        self.context.as_deref().unwrap_or(DEFAULT_CONTEXT)
    }
}

/// Tokenized (context, instruction, target) triple.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSample {
    pub context: Vec<usize>,
    pub instruction: Vec<usize>,
    pub target: Vec<usize>,
}

impl PromptSample {
    /// Context is right-padded or right-truncated to `n_ctx`; the target gets an end token.
    pub fn from_record(record: &CorpusRecord, vocab: &Vocab, n_ctx: usize) -> Result<Self> {
        if n_ctx == 0 {
            return Err(Error::Config("n_ctx must be positive".into()));
        }
        let mut context = vocab.encode(record.context_or_default());
        context.resize(n_ctx, PAD);
        let instruction = vocab.encode(&record.instruction);
        let mut target = vocab.encode(&record.output);
        target.push(EOS);
        Ok(Self {
            context,
            instruction,
            target,
        })
    }

    pub fn split(&self) -> (&[usize], &[usize]) {
        (&self.context, &self.instruction)
    }

    pub fn merge(context: Vec<usize>, instruction: Vec<usize>, target: Vec<usize>) -> Result<Self> {
        if target.last() != Some(&EOS) {
            return Err(Error::Ingestion(
                "target must end with the end token".into(),
            ));
        }
        Ok(Self {
            context,
            instruction,
            target,
        })
    }

    /// Encoder keep-mask: context pads are hidden, instruction tokens visible.
    pub fn encoder_keep_mask(&self) -> Vec<bool> {
        self.context
            .iter()
            .map(|&id| id != PAD)
            .chain(self.instruction.iter().map(|_| true))
            .collect()
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Ingestion(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Ingestion(format!(
            "{} holds no records",
            path.display()
        )));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const VARIABLES: [&str; 16] = [
    "a", "b", "c", "d", "x", "y", "z", "i", "j", "k", "n", "count", "total", "value", "result",
    "item",
];
const FUNCTIONS: [&str; 5] = ["foo", "bar", "compute", "process", "update"];

fn pick<'a, R: Rng>(rng: &mut R, items: &[&'a str]) -> &'a str {
    items[rng.random_range(0..items.len())]
}

fn two_vars<R: Rng>(rng: &mut R) -> (&'static str, &'static str) {
    let a = pick(rng, &VARIABLES);
    loop {
        let b = pick(rng, &VARIABLES);
        if b != a {
            return (a, b);
        }
    }
}

/// Instruction with its output in the plain and in the fully parenthesized
/// convention. The two coincide when the program has no operator.
struct SynthPair {
    instruction: String,
    plain: String,
    explicit: String,
}

fn synth_pair<R: Rng>(rng: &mut R) -> SynthPair {
    let (a, b) = two_vars(rng);
    let n = rng.random_range(0..10);
    let m = rng.random_range(1..10);
    let f = pick(rng, &FUNCTIONS);
    let same = |i: String, o: String| (i, o.clone(), o);
    let (instruction, plain, explicit) = match rng.random_range(0..14) {
        0 => same(format!("assign {n} to {a}"), format!("{a} = {n}")),
        1 => (
            format!("return the sum of {a} and {b}"),
            format!("return {a} + {b}"),
            format!("return ( {a} + {b} )"),
        ),
        2 => (
            format!("return the product of {a} and {b}"),
            format!("return {a} * {b}"),
            format!("return ( {a} * {b} )"),
        ),
        3 => (
            format!("return the difference of {a} and {b}"),
            format!("return {a} - {b}"),
            format!("return ( {a} - {b} )"),
        ),
        4 => same(format!("print the value of {a}"), format!("print ( {a} )")),
        5 => (
            format!("return the larger of {a} and {b}"),
            format!("if {a} > {b} : return {a} else : return {b}"),
            format!("if ( {a} > {b} ) : return {a} else : return {b}"),
        ),
        6 => (
            format!("return the smaller of {a} and {b}"),
            format!("if {a} < {b} : return {a} else : return {b}"),
            format!("if ( {a} < {b} ) : return {a} else : return {b}"),
        ),
        7 => (
            format!("print {a} if it equals {b}"),
            format!("if {a} == {b} : print ( {a} )"),
            format!("if ( {a} == {b} ) : print ( {a} )"),
        ),
        8 => (
            format!("add {m} to {a} and return it"),
            format!("{a} = {a} + {m} ; return {a}"),
            format!("{a} = ( {a} + {m} ) ; return {a}"),
        ),
        9 => same(
            format!("call {f} with {a} and {b}"),
            format!("{f} ( {a} , {b} )"),
        ),
        10 => same(
            format!("return the length of {a}"),
            format!("return len ( {a} )"),
        ),
        11 => (
            format!("double {a} and store it in {b}"),
            format!("{b} = {a} * 2"),
            format!("{b} = ( {a} * 2 )"),
        ),
        12 => (
            format!("return {a} times {m} plus {n}"),
            format!("return {a} * {m} + {n}"),
            format!("return ( ( {a} * {m} ) + {n} )"),
        ),
        _ => same(
            format!("set {b} to {f} of {a}"),
            format!("{b} = {f} ( {a} )"),
        ),
    };
    SynthPair {
        instruction,
        plain,
        explicit,
    }
}

/// Contexts that ask for the plain convention.
pub const PLAIN_CONTEXTS: [&str; 2] = [
    "Write compact code for the task below.",
    "Answer with short code and no extra brackets.",
];

/// Contexts that ask for every operation to be parenthesized.
pub const EXPLICIT_CONTEXTS: [&str; 2] = [
    "Write fully parenthesized code for the task below.",
    "Answer with code that brackets every operation.",
];

fn distinct_pairs<R: Rng>(
    rng: &mut R,
    total: usize,
    exclude: &BTreeSet<String>,
) -> Result<Vec<SynthPair>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while out.len() < total {
        attempts += 1;
        if attempts > 1000 * total + 10_000 {
            return Err(Error::Config(format!(
                "could not draw {total} distinct synthetic samples"
            )));
        }
        let pair = synth_pair(rng);
        if !exclude.contains(&pair.instruction) && seen.insert(pair.instruction.clone()) {
            out.push(pair);
        }
    }
    Ok(out)
}

/// Deterministic train/held-out split of distinct synthetic samples. Every
/// record uses the default context and the plain convention.
pub fn generate_synthetic(
    seed: u64,
    n_train: usize,
    n_heldout: usize,
) -> Result<(Vec<CorpusRecord>, Vec<CorpusRecord>)> {
    if n_train == 0 {
        return Err(Error::Config(
            "synthetic corpus needs at least one training sample".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records: Vec<CorpusRecord> =
        distinct_pairs(&mut rng, n_train + n_heldout, &BTreeSet::new())?
            .into_iter()
            .map(|p| CorpusRecord {
                context: None,
                instruction: p.instruction,
                output: p.plain,
            })
            .collect();
    records.shuffle(&mut rng);
    let heldout = records.split_off(n_train);
    Ok((records, heldout))
}

/// Pretraining mixture over both conventions. A third of the records carry a
/// plain-style context, a third an explicit-style one, and a third the
/// default context with the convention drawn by a fair coin. Instructions in
/// `exclude` are never drawn.
pub fn generate_pretraining(
    seed: u64,
    n_train: usize,
    n_heldout: usize,
    exclude: &[CorpusRecord],
) -> Result<(Vec<CorpusRecord>, Vec<CorpusRecord>)> {
    if n_train == 0 {
        return Err(Error::Config(
            "pretraining corpus needs at least one training sample".into(),
        ));
    }
    let exclude: BTreeSet<String> = exclude.iter().map(|r| r.instruction.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = distinct_pairs(&mut rng, n_train + n_heldout, &exclude)?;
    let mut records: Vec<CorpusRecord> = pairs
        .into_iter()
        .map(|p| {
            let (context, explicit) = match rng.random_range(0..3) {
                0 => (pick(&mut rng, &PLAIN_CONTEXTS).to_string(), false),
                1 => (pick(&mut rng, &EXPLICIT_CONTEXTS).to_string(), true),
                _ => (DEFAULT_CONTEXT.to_string(), rng.random_bool(0.5)),
            };
            CorpusRecord {
                context: Some(context),
                instruction: p.instruction,
                output: if explicit { p.explicit } else { p.plain },
            }
        })
        .collect();
    records.shuffle(&mut rng);
    let heldout = records.split_off(n_train);
    Ok((records, heldout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_lm::vocab::BOS;

    fn vocab() -> Vocab {
        let (train, held) = generate_synthetic(1, 50, 10).unwrap();
        let texts: Vec<String> = train
            .iter()
            .chain(&held)
            .flat_map(|r| {
                [
                    r.context_or_default().to_string(),
                    r.instruction.clone(),
                    r.output.clone(),
                ]
            })
            .collect();
        Vocab::build(&texts, 256).unwrap()
    }

    #[test]
    fn sample_context_is_padded_and_truncated() {
        let v = vocab();
        let rec = CorpusRecord {
            context: None,
            instruction: "return the sum of a and b".into(),
            output: "return a + b".into(),
        };
        let s = PromptSample::from_record(&rec, &v, 8).unwrap();
        assert_eq!(
            v.decode(&s.context).unwrap(),
            "Below is an instruction that describes a task"
        );
        assert_eq!(*s.target.last().unwrap(), EOS);
        let short = CorpusRecord {
            context: Some("Below is".into()),
            ..rec.clone()
        };
        let s = PromptSample::from_record(&short, &v, 4).unwrap();
        assert_eq!(&s.context[2..], [PAD, PAD]);
        assert_eq!(s.encoder_keep_mask()[..4], [true, true, false, false]);
    }

    #[test]
    fn split_and_merge_are_inverse() {
        let v = vocab();
        let rec = CorpusRecord {
            context: None,
            instruction: "print the value of x".into(),
            output: "print ( x )".into(),
        };
        let s = PromptSample::from_record(&rec, &v, 8).unwrap();
        let (ctx, ins) = s.split();
        assert_eq!(ins, v.encode(&rec.instruction).as_slice());
        let merged = PromptSample::merge(ctx.to_vec(), ins.to_vec(), s.target.clone()).unwrap();
        assert_eq!(merged, s);
        assert!(PromptSample::merge(vec![], vec![], vec![BOS]).is_err());
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_disjoint() {
        let (a, b) = generate_synthetic(9, 200, 50).unwrap();
        let (a2, b2) = generate_synthetic(9, 200, 50).unwrap();
        assert_eq!((a.len(), b.len()), (200, 50));
        assert_eq!(a, a2);
        assert_eq!(b, b2);
        let train: BTreeSet<_> = a.iter().map(|r| &r.instruction).collect();
        assert!(b.iter().all(|r| !train.contains(&r.instruction)));
        let (c, _) = generate_synthetic(10, 200, 50).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_outputs_parse() {
        let (a, _) = generate_synthetic(3, 300, 0).unwrap();
        for r in &a {
            crate::metrics::parse_mini(&r.output).unwrap();
        }
    }

    #[test]
    fn both_conventions_parse_to_the_same_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..300 {
            let p = synth_pair(&mut rng);
            let a = crate::metrics::parse_mini(&p.plain).unwrap();
            let b = crate::metrics::parse_mini(&p.explicit).unwrap();
            assert_eq!(a.shape_key(), b.shape_key(), "{} / {}", p.plain, p.explicit);
        }
    }

    #[test]
    fn pretraining_mixture_avoids_excluded_instructions() {
        let (_, held) = generate_synthetic(9, 100, 40).unwrap();
        let (pre, pre_held) = generate_pretraining(9, 300, 30, &held).unwrap();
        assert_eq!((pre.len(), pre_held.len()), (300, 30));
        let banned: BTreeSet<_> = held.iter().map(|r| &r.instruction).collect();
        assert!(pre
            .iter()
            .chain(&pre_held)
            .all(|r| !banned.contains(&r.instruction)));
        let grouping = |out: &str| {
            let toks: Vec<&str> = out.split(' ').collect();
            (0..toks.len()).any(|i| {
                toks[i] == "("
                    && (i == 0
                        || !(["print", "len"].contains(&toks[i - 1])
                            || FUNCTIONS.contains(&toks[i - 1])))
            })
        };
        let has_op = |out: &str| {
            out.split(' ')
                .any(|t| ["+", "-", "*", ">", "<", "=="].contains(&t))
        };
        for r in &pre {
            let ctx = r.context.as_deref().unwrap();
            if PLAIN_CONTEXTS.contains(&ctx) {
                assert!(!grouping(&r.output), "{}", r.output);
            } else if EXPLICIT_CONTEXTS.contains(&ctx) {
                assert_eq!(grouping(&r.output), has_op(&r.output), "{}", r.output);
            } else {
                assert_eq!(ctx, DEFAULT_CONTEXT);
            }
        }
        let default_styles: BTreeSet<bool> = pre
            .iter()
            .filter(|r| r.context.as_deref() == Some(DEFAULT_CONTEXT))
            .filter(|r| r.output.starts_with("return") && r.output.contains('+'))
            .map(|r| r.output.starts_with("return ("))
            .collect();
        assert_eq!(default_styles.len(), 2);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let (a, _) = generate_synthetic(4, 5, 0).unwrap();
        write_jsonl(&path, &a).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), a);
        std::fs::write(&path, "{\"instruction\": \"x\"}\n").unwrap();
        assert!(matches!(read_jsonl(&path), Err(Error::Ingestion(_))));
    }
}
