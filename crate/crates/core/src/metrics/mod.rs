//! Lexical and syntactic scores for generated code.

mod codebleu;
mod lexical;
mod mini;
mod report;

pub use codebleu::{codebleu_lite, codebleu_parts, CodeBleuParts, KEYWORDS, KEYWORD_WEIGHT};
pub use lexical::{
    bleu4, chrf, chrf_default, chunk_count, meteor_alignment, meteor_lite, rouge_l, sentence_bleu4,
    stem, SUFFIXES,
};
pub use mini::{parse_mini, MiniAst, NodeKind};
pub use report::{
    evaluate, read_pairs, read_texts, EvalPair, Metric, MetricConfig, MetricReport, MetricScores,
};
