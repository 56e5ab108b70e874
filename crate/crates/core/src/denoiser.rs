//! The trainable diffusion model: a low-width transformer between a down- and
//! an up-projection, conditioned on the timestep by additive broadcast.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::X0Predictor;
use crate::error::{Error, Result};
use crate::nn::{self, AttentionIdx, FeedForwardIdx, LinearIdx, NormIdx, ParamBuilder, ParamSet};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub n_ctx: usize,
    pub d_model: usize,
    pub d_low: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub init_std: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            n_ctx: 8,
            d_model: 64,
            d_low: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            init_std: 0.02,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("denoiser: {msg}")));
        if self.n_ctx == 0 || self.d_low == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("n_ctx, d_low, n_heads and d_ff must be positive".into());
        }
        if self.d_low >= self.d_model {
            return bad(format!(
                "d_low {} must be below d_model {}",
                self.d_low, self.d_model
            ));
        }
        if !self.d_low.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_low {} not divisible by {} heads",
                self.d_low, self.n_heads
            ));
        }
        if !self.d_low.is_multiple_of(2) {
            return bad("d_low must be even for the timestep embedding".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }
}

/// Sinusoidal embedding, interleaved as `[sin(t·f0), cos(t·f0), sin(t·f1), ...]`
/// with `f_i = 10000^(-i / (dim/2))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "timestep embedding width {dim} must be even and positive"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        let phase = t as f64 * freq;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct Block {
    attn_norm: NormIdx,
    attn: AttentionIdx,
    ff_norm: NormIdx,
    ff: FeedForwardIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    down: LinearIdx,
    time: LinearIdx,
    pos: usize,
    blocks: Vec<Block>,
    out_norm: NormIdx,
    up: LinearIdx,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    layout: Layout,
    params: ParamSet,
}

impl Denoiser {
    /// Weights drawn from N(0, init_std²); the up-projection starts at zero so
    /// the initial output is exactly zero.
    pub fn init<R: Rng>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, dl) = (config.d_model, config.d_low);
        let mut b = ParamBuilder::new(rng, config.init_std);
        let down = b.linear("down", d, dl);
        let time = b.linear("time", dl, dl);
        let pos = b.normal("pos", &[config.n_ctx, dl]);
        let blocks = (0..config.n_layers)
            .map(|i| Block {
                attn_norm: b.norm(&format!("block{i}.attn_norm"), dl),
                attn: b.attention(&format!("block{i}.attn"), dl),
                ff_norm: b.norm(&format!("block{i}.ff_norm"), dl),
                ff: b.feed_forward(&format!("block{i}.ff"), dl, config.d_ff),
            })
            .collect();
        let out_norm = b.norm("out_norm", dl);
        let up = b.zero_linear("up", dl, d);
        Ok(Self {
            config,
            layout: Layout {
                down,
                time,
                pos,
                blocks,
                out_norm,
                up,
            },
            params: b.params,
        })
    }

    pub fn from_tensors(config: DenoiserConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut d = Self::init(config, &mut rng)?;
        d.params.assign(tensors)?;
        Ok(d)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Down- and up-projection weights, `[d_model × d_low]` and `[d_low × d_model]`.
    pub fn projections(&self) -> (&Tensor, &Tensor) {
        (
            self.params.get(self.layout.down.weight),
            self.params.get(self.layout.up.weight),
        )
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.bind(g)
    }

    /// Records the denoiser on `x_t` (shape `n_ctx × d_model`).
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x_t: Var, t: usize) -> Result<Var> {
        let shape = g.value(x_t).shape();
        if shape != [self.config.n_ctx, self.config.d_model] {
            return Err(Error::Contract(format!(
                "denoiser expects [{}, {}], got {shape:?}",
                self.config.n_ctx, self.config.d_model
            )));
        }
        let temb = Tensor::vector(timestep_embedding(t, self.config.d_low)?)?
            .reshape(vec![1, self.config.d_low])?;
        let temb = g.constant(temb);
        let temb = nn::linear(g, vars, self.layout.time, temb)?;
        let mut h = nn::linear(g, vars, self.layout.down, x_t)?;
        h = g.add_row(h, temb)?;
        h = g.add(h, vars[self.layout.pos])?;
        for block in &self.layout.blocks {
            let n = nn::norm(g, vars, block.attn_norm, h)?;
            let a = nn::attention(g, vars, block.attn, n, n, self.config.n_heads, None)?;
            h = g.add(h, a)?;
            let n = nn::norm(g, vars, block.ff_norm, h)?;
            let f = nn::feed_forward(g, vars, block.ff, n)?;
            h = g.add(h, f)?;
        }
        let h = nn::norm(g, vars, self.layout.out_norm, h)?;
        nn::linear(g, vars, self.layout.up, h)
    }

    /// Eager evaluation outside any training record.
    pub fn denoise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind_constant(&mut g);
        let x = g.constant(x_t.clone());
        let y = self.forward(&mut g, &vars, x, t)?;
        Ok(g.value(y).clone())
    }
}

impl X0Predictor for Denoiser {
    fn predict_x0(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.denoise(x_t, t)
    }
}
