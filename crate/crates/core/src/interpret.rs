//! Nearest-word readout of optimized context embeddings.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::toy_lm::Vocab;

pub const DEFAULT_K: usize = 5;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("cosine", &[a.len()], &[b.len()]));
    }
    let (na, nb) = (dot(a, a), dot(b, b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: usize,
    pub word: String,
    pub score: f64,
}

/// Exact scan over non-reserved rows of `table`, best first; equal scores
/// rank by ascending id. Zero rows are skipped.
pub fn top_k_nearest(
    query: &[f64],
    table: &Tensor,
    vocab: &Vocab,
    k: usize,
) -> Result<Vec<Neighbor>> {
    if table.shape().len() != 2 || table.rows() != vocab.len() {
        return Err(Error::dims(
            "top_k_nearest",
            table.shape(),
            &[vocab.len(), query.len()],
        ));
    }
    if table.cols() != query.len() {
        return Err(Error::dims(
            "top_k_nearest",
            &[table.cols()],
            &[query.len()],
        ));
    }
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    if dot(query, query) == 0.0 {
        return Err(Error::Degenerate("zero query vector".into()));
    }
    let mut scored = Vec::with_capacity(vocab.len());
    let mut skipped = 0;
    for id in (0..vocab.len()).filter(|&i| !Vocab::is_reserved(i)) {
        match cosine(query, table.row(id)) {
            Ok(s) => scored.push((id, s)),
            Err(Error::Degenerate(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if skipped > 0 {
        log::warn!("top_k_nearest: skipped {skipped} zero embedding rows");
    }
    if k > scored.len() {
        return Err(Error::Contract(format!(
            "k = {k} exceeds the {} candidate words",
            scored.len()
        )));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
        .into_iter()
        .take(k)
        .map(|(id, score)| {
            Ok(Neighbor {
                id,
                word: vocab.token(id)?.to_string(),
                score,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionNeighbors {
    pub position: usize,
    pub neighbors: Vec<Neighbor>,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborReport {
    pub k: usize,
    pub positions: Vec<PositionNeighbors>,
    /// Positions whose nearest word is also nearest for another position.
    pub shared_nearest: usize,
    pub distinct_nearest: usize,
}

impl NeighborReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,rank,word,score\n");
        for p in &self.positions {
            for (rank, n) in p.neighbors.iter().enumerate() {
                let word = if n.word.contains([',', '"']) {
                    format!("\"{}\"", n.word.replace('"', "\"\""))
                } else {
                    n.word.clone()
                };
                let _ = writeln!(out, "{},{},{},{}", p.position, rank + 1, word, n.score);
            }
        }
        out
    }
}

/// Top-k neighbors for every row of an optimized context.
pub fn interpret_context(
    ctx: &Tensor,
    vocab: &Vocab,
    table: &Tensor,
    k: usize,
) -> Result<NeighborReport> {
    if ctx.shape().len() != 2 {
        return Err(Error::dims(
            "interpret_context",
            ctx.shape(),
            &[0, table.cols()],
        ));
    }
    let positions = (0..ctx.rows())
        .map(|i| {
            Ok(PositionNeighbors {
                position: i,
                neighbors: top_k_nearest(ctx.row(i), table, vocab, k)?,
                vector: ctx.row(i).to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut firsts: HashMap<usize, usize> = HashMap::new();
    for p in &positions {
        *firsts.entry(p.neighbors[0].id).or_insert(0) += 1;
    }
    let shared_nearest = firsts.values().filter(|&&c| c > 1).sum();
    Ok(NeighborReport {
        k,
        distinct_nearest: firsts.len(),
        shared_nearest,
        positions,
    })
}
