//! Named parameter storage and the transformer building blocks shared by the
//! denoiser and the toy language model.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Ordered, named parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            tensor,
            frozen: false,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.params[i].tensor
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|p| &p.tensor)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.tensor).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn freeze(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
        }
    }

    pub fn is_frozen(&self) -> bool {
        !self.params.is_empty() && self.params.iter().all(|p| p.frozen)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records every tensor as a leaf; frozen tensors become non-trainable.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.tensor.clone(), !p.frozen))
            .collect()
    }

    /// Records every tensor as a non-trainable leaf regardless of flags.
    pub fn bind_constant(&self, g: &mut Graph) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.constant(p.tensor.clone()))
            .collect()
    }

    /// Replaces tensors by name-ordered list, checking names and shapes.
    pub fn assign(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                named.len()
            )));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(named) {
            if p.name != name {
                return Err(Error::Contract(format!(
                    "expected tensor {}, got {name}",
                    p.name
                )));
            }
            if p.tensor.shape() != t.shape() {
                return Err(Error::dims("assign", p.tensor.shape(), t.shape()));
            }
            p.tensor = t;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian scalar bytes.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIdx {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionIdx {
    pub query: LinearIdx,
    pub key: LinearIdx,
    pub value: LinearIdx,
    pub out: LinearIdx,
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardIdx {
    pub up: LinearIdx,
    pub down: LinearIdx,
}

/// Allocates initialized tensors into a [`ParamSet`].
pub struct ParamBuilder<'a, R: Rng> {
    pub params: ParamSet,
    pub rng: &'a mut R,
    pub std: f64,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(rng: &'a mut R, std: f64) -> Self {
        Self {
            params: ParamSet::new(),
            rng,
            std,
        }
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let t = Tensor::randn(shape, self.std, self.rng);
        self.params.push(name, t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        self.params.push(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        self.params.push(name, Tensor::full(shape, 1.0))
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> LinearIdx {
        LinearIdx {
            weight: self.normal(format!("{name}.weight"), &[d_in, d_out]),
            bias: self.zeros(format!("{name}.bias"), &[d_out]),
        }
    }

    pub fn zero_linear(&mut self, name: &str, d_in: usize, d_out: usize) -> LinearIdx {
        LinearIdx {
            weight: self.zeros(format!("{name}.weight"), &[d_in, d_out]),
            bias: self.zeros(format!("{name}.bias"), &[d_out]),
        }
    }

    pub fn norm(&mut self, name: &str, d: usize) -> NormIdx {
        NormIdx {
            gain: self.ones(format!("{name}.gain"), &[d]),
            bias: self.zeros(format!("{name}.bias"), &[d]),
        }
    }

    pub fn attention(&mut self, name: &str, d: usize) -> AttentionIdx {
        AttentionIdx {
            query: self.linear(&format!("{name}.query"), d, d),
            key: self.linear(&format!("{name}.key"), d, d),
            value: self.linear(&format!("{name}.value"), d, d),
            out: self.linear(&format!("{name}.out"), d, d),
        }
    }

    pub fn feed_forward(&mut self, name: &str, d: usize, d_ff: usize) -> FeedForwardIdx {
        FeedForwardIdx {
            up: self.linear(&format!("{name}.up"), d, d_ff),
            down: self.linear(&format!("{name}.down"), d_ff, d),
        }
    }
}

pub const NORM_EPS: f64 = 1e-5;

pub fn linear(g: &mut Graph, vars: &[Var], idx: LinearIdx, x: Var) -> Result<Var> {
    let y = g.matmul(x, vars[idx.weight])?;
    g.add_row(y, vars[idx.bias])
}

pub fn norm(g: &mut Graph, vars: &[Var], idx: NormIdx, x: Var) -> Result<Var> {
    let y = g.layer_norm(x, NORM_EPS)?;
    let y = g.mul_row(y, vars[idx.gain])?;
    g.add_row(y, vars[idx.bias])
}

pub fn feed_forward(g: &mut Graph, vars: &[Var], idx: FeedForwardIdx, x: Var) -> Result<Var> {
    let h = linear(g, vars, idx.up, x)?;
    let h = g.gelu(h)?;
    linear(g, vars, idx.down, h)
}

/// Row-major `q_len × k_len` keep-mask; `None` when nothing is masked.
pub fn attention_mask(
    q_len: usize,
    k_len: usize,
    causal: bool,
    key_keep: Option<&[bool]>,
) -> Option<Vec<bool>> {
    if !causal && key_keep.is_none_or(|k| k.iter().all(|&b| b)) {
        return None;
    }
    let mut mask = vec![true; q_len * k_len];
    for i in 0..q_len {
        for j in 0..k_len {
            let mut keep = !causal || j <= i;
            if let Some(k) = key_keep {
                keep &= k[j];
            }
            mask[i * k_len + j] = keep;
        }
    }
    Some(mask)
}

/// Multi-head scaled dot-product attention of `q_in` over `kv_in`.
pub fn attention(
    g: &mut Graph,
    vars: &[Var],
    idx: AttentionIdx,
    q_in: Var,
    kv_in: Var,
    n_heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let d = g.value(q_in).cols();
    if !d.is_multiple_of(n_heads) {
        return Err(Error::Config(format!(
            "width {d} not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let q = linear(g, vars, idx.query, q_in)?;
    let k = linear(g, vars, idx.key, kv_in)?;
    let v = linear(g, vars, idx.value, kv_in)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let probs = g.softmax_rows(scores, mask)?;
        heads.push(g.matmul(probs, vh)?);
    }
    let merged = if n_heads == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    linear(g, vars, idx.out, merged)
}
