use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::codebleu::{codebleu_lite, KEYWORDS};
use super::lexical::{bleu4, check_corpus, chrf, meteor_lite, rouge_l, sentence_bleu4};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu4,
    Chrf,
    RougeL,
    MeteorLite,
    CodebleuLite,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Bleu4,
        Metric::Chrf,
        Metric::RougeL,
        Metric::MeteorLite,
        Metric::CodebleuLite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Bleu4 => "bleu4",
            Metric::Chrf => "chrf",
            Metric::RougeL => "rouge_l",
            Metric::MeteorLite => "meteor_lite",
            Metric::CodebleuLite => "codebleu_lite",
        }
    }

    /// Corpus-level metrics pool counts instead of averaging sample scores.
    pub fn is_corpus_level(self) -> bool {
        matches!(self, Metric::Bleu4 | Metric::CodebleuLite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub bleu4: bool,
    pub chrf: bool,
    pub rouge_l: bool,
    pub meteor_lite: bool,
    pub codebleu_lite: bool,
    pub chrf_max_n: usize,
    pub chrf_beta: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            bleu4: true,
            chrf: true,
            rouge_l: true,
            meteor_lite: true,
            codebleu_lite: true,
            chrf_max_n: 6,
            chrf_beta: 2.0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chrf_max_n == 0 || !(self.chrf_beta > 0.0 && self.chrf_beta.is_finite()) {
            return Err(Error::Config(
                "metrics: chrf_max_n and chrf_beta must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn enabled(&self) -> Vec<Metric> {
        let flags = [
            self.bleu4,
            self.chrf,
            self.rouge_l,
            self.meteor_lite,
            self.codebleu_lite,
        ];
        Metric::ALL
            .into_iter()
            .zip(flags)
            .filter(|(_, on)| *on)
            .map(|(m, _)| m)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub aggregate: f64,
    pub per_sample: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_samples: usize,
    pub metrics: BTreeMap<Metric, MetricScores>,
}

impl MetricReport {
    pub fn aggregate(&self, m: Metric) -> Option<f64> {
        self.metrics.get(&m).map(|s| s.aggregate)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per sample plus a final `aggregate` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample");
        for m in self.metrics.keys() {
            out.push(',');
            out.push_str(m.name());
        }
        out.push('\n');
        for i in 0..self.n_samples {
            let _ = write!(out, "{i}");
            for s in self.metrics.values() {
                let _ = write!(out, ",{}", s.per_sample[i]);
            }
            out.push('\n');
        }
        out.push_str("aggregate");
        for s in self.metrics.values() {
            let _ = write!(out, ",{}", s.aggregate);
        }
        out.push('\n');
        out
    }
}

/// Scores paired candidates and references with every enabled metric.
pub fn evaluate<S: AsRef<str>>(
    candidates: &[S],
    references: &[S],
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    cfg.validate()?;
    check_corpus(candidates, references)?;
    let pairs: Vec<(&str, &str)> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| (c.as_ref(), r.as_ref()))
        .collect();
    let mut metrics = BTreeMap::new();
    for m in cfg.enabled() {
        let per_sample: Vec<f64> = match m {
            Metric::Bleu4 => pairs.iter().map(|(c, r)| sentence_bleu4(c, r)).collect(),
            Metric::Chrf => pairs
                .iter()
                .map(|(c, r)| chrf(c, r, cfg.chrf_max_n, cfg.chrf_beta))
                .collect(),
            Metric::RougeL => pairs.iter().map(|(c, r)| rouge_l(c, r)).collect(),
            Metric::MeteorLite => pairs.iter().map(|(c, r)| meteor_lite(c, r)).collect(),
            Metric::CodebleuLite => pairs
                .iter()
                .map(|(c, r)| codebleu_lite(&[*c], &[*r], &KEYWORDS))
                .collect::<Result<_>>()?,
        };
        let aggregate = match m {
            Metric::Bleu4 => bleu4(candidates, references)?,
            Metric::CodebleuLite => codebleu_lite(candidates, references, &KEYWORDS)?,
            _ => per_sample.iter().sum::<f64>() / per_sample.len() as f64,
        };
        metrics.insert(
            m,
            MetricScores {
                aggregate,
                per_sample,
            },
        );
    }
    Ok(MetricReport {
        n_samples: pairs.len(),
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub candidate: String,
    pub reference: String,
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Ingestion(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Reads `{"candidate", "reference"}` records.
pub fn read_pairs(path: &Path) -> Result<Vec<EvalPair>> {
    read_lines(path)
}

#[derive(Deserialize)]
struct TextField {
    #[serde(alias = "candidate", alias = "reference", alias = "output")]
    text: String,
}

/// Reads one text per line from records carrying a `candidate`, `reference`
/// or `output` field.
pub fn read_texts(path: &Path) -> Result<Vec<String>> {
    Ok(read_lines::<TextField>(path)?
        .into_iter()
        .map(|t| t.text)
        .collect())
}
