use serde::{Deserialize, Serialize};

use super::model::ToyLm;
use super::vocab::{BOS, EOS};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub max_len: usize,
    pub rep_penalty: f64,
    pub no_repeat_ngram: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_len: 32,
            rep_penalty: 1.0,
            no_repeat_ngram: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::Config("decode: max_len must be at least 1".into()));
        }
        if !(self.rep_penalty >= 1.0 && self.rep_penalty.is_finite()) {
            return Err(Error::Config(
                "decode: rep_penalty must be finite and >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Tokens that would complete an n-gram already present in `emitted`.
fn banned_by_ngram(emitted: &[usize], n: usize) -> Vec<usize> {
    if n == 0 || emitted.len() + 1 < n {
        return Vec::new();
    }
    let prefix = &emitted[emitted.len() + 1 - n..];
    emitted
        .windows(n)
        .filter(|w| &w[..n - 1] == prefix)
        .map(|w| w[n - 1])
        .collect()
}

/// Applies the repetition controls to one step's logits in place.
pub fn adjust_logits(logits: &mut [f64], emitted: &[usize], cfg: &DecodeConfig) {
    if cfg.rep_penalty > 1.0 {
        let mut seen = emitted.to_vec();
        seen.sort_unstable();
        seen.dedup();
        for id in seen {
            if let Some(l) = logits.get_mut(id) {
                *l = if *l > 0.0 {
                    *l / cfg.rep_penalty
                } else {
                    *l * cfg.rep_penalty
                };
            }
        }
    }
    for id in banned_by_ngram(emitted, cfg.no_repeat_ngram) {
        if let Some(l) = logits.get_mut(id) {
            *l = f64::NEG_INFINITY;
        }
    }
}

/// Greedy decoding over a step function that maps the tokens emitted so far to
/// next-token logits. The end token is not included in the result.
pub fn greedy_decode<F>(mut step_logits: F, cfg: &DecodeConfig) -> Result<Vec<usize>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut emitted = Vec::new();
    while emitted.len() < cfg.max_len {
        let mut logits = step_logits(&emitted)?;
        adjust_logits(&mut logits, &emitted, cfg);
        let mut best: Option<(usize, f64)> = None;
        for (id, &l) in logits.iter().enumerate() {
            if l.is_nan() || l == f64::NEG_INFINITY {
                continue;
            }
            if best.is_none_or(|(_, b)| l > b) {
                best = Some((id, l));
            }
        }
        let next = best.map_or(EOS, |(id, _)| id);
        if next == EOS {
            break;
        }
        emitted.push(next);
    }
    Ok(emitted)
}

/// Greedy generation from real-valued encoder inputs (context then
/// instruction embeddings). The decoder starts from `[BOS] + instruction`.
pub fn generate(
    lm: &ToyLm,
    encoder_embeds: &Tensor,
    key_keep: Option<&[bool]>,
    instruction: &[usize],
    cfg: &DecodeConfig,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    let mut g = Graph::new();
    let vars = lm.params().bind_constant(&mut g);
    let x = g.constant(encoder_embeds.clone());
    let enc = lm.encode(&mut g, &vars, x, key_keep)?;
    let mut prefix = Vec::with_capacity(1 + instruction.len() + cfg.max_len);
    prefix.push(BOS);
    prefix.extend_from_slice(instruction);
    let start = prefix.len();
    let room = lm.config().max_dec_len.saturating_sub(start);
    let cfg = DecodeConfig {
        max_len: cfg.max_len.min(room + 1),
        ..*cfg
    };
    let mark = g.len();
    greedy_decode(
        |emitted| {
            g.truncate(mark);
            prefix.truncate(start);
            prefix.extend_from_slice(emitted);
            let h = lm.decode_hidden(&mut g, &vars, &enc, &prefix)?;
            let last = g.slice_rows(h, prefix.len() - 1, 1)?;
            let logits = lm.project(&mut g, &vars, last)?;
            Ok(g.value(logits).data().to_vec())
        },
        &cfg,
    )
}
