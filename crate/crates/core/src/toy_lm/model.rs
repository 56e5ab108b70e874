use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::PromptSample;
use super::vocab::BOS;
use crate::error::{Error, Result};
use crate::nn::{self, AttentionIdx, FeedForwardIdx, NormIdx, ParamBuilder, ParamSet};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_enc_len: usize,
    pub max_dec_len: usize,
    pub init_std: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_enc_len: 48,
            max_dec_len: 64,
            init_std: 0.02,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("lm: {msg}")));
        if self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return bad("widths and head count must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return bad("need at least one encoder and one decoder layer");
        }
        if self.max_enc_len == 0 || self.max_dec_len == 0 {
            return bad("maximum lengths must be positive");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    attn_norm: NormIdx,
    attn: AttentionIdx,
    ff_norm: NormIdx,
    ff: FeedForwardIdx,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    self_norm: NormIdx,
    self_attn: AttentionIdx,
    cross_norm: NormIdx,
    cross_attn: AttentionIdx,
    ff_norm: NormIdx,
    ff: FeedForwardIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    enc_pos: usize,
    dec_pos: usize,
    encoder: Vec<EncoderBlock>,
    enc_norm: NormIdx,
    decoder: Vec<DecoderBlock>,
    dec_norm: NormIdx,
}

/// Small pre-norm encoder-decoder with a shared, weight-tied embedding table.
#[derive(Clone, Debug)]
pub struct ToyLm {
    config: LmConfig,
    vocab_size: usize,
    layout: Layout,
    params: ParamSet,
}

/// Encoder output together with the key mask the decoder must respect.
pub struct Encoded<'m> {
    pub states: Var,
    pub key_keep: Option<&'m [bool]>,
}

impl ToyLm {
    pub fn init<R: Rng>(config: LmConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        let d = config.d_model;
        let mut b = ParamBuilder::new(rng, config.init_std);
        let embed = b.normal("embed", &[vocab_size, d]);
        let enc_pos = b.normal("enc_pos", &[config.max_enc_len, d]);
        let dec_pos = b.normal("dec_pos", &[config.max_dec_len, d]);
        let encoder = (0..config.n_enc_layers)
            .map(|i| EncoderBlock {
                attn_norm: b.norm(&format!("enc{i}.attn_norm"), d),
                attn: b.attention(&format!("enc{i}.attn"), d),
                ff_norm: b.norm(&format!("enc{i}.ff_norm"), d),
                ff: b.feed_forward(&format!("enc{i}.ff"), d, config.d_ff),
            })
            .collect();
        let enc_norm = b.norm("enc_norm", d);
        let decoder = (0..config.n_dec_layers)
            .map(|i| DecoderBlock {
                self_norm: b.norm(&format!("dec{i}.self_norm"), d),
                self_attn: b.attention(&format!("dec{i}.self_attn"), d),
                cross_norm: b.norm(&format!("dec{i}.cross_norm"), d),
                cross_attn: b.attention(&format!("dec{i}.cross_attn"), d),
                ff_norm: b.norm(&format!("dec{i}.ff_norm"), d),
                ff: b.feed_forward(&format!("dec{i}.ff"), d, config.d_ff),
            })
            .collect();
        let dec_norm = b.norm("dec_norm", d);
        Ok(Self {
            config,
            vocab_size,
            layout: Layout {
                embed,
                enc_pos,
                dec_pos,
                encoder,
                enc_norm,
                decoder,
                dec_norm,
            },
            params: b.params,
        })
    }

    /// Rebuilds a model around stored tensors (names and shapes must match).
    pub fn from_tensors(
        config: LmConfig,
        vocab_size: usize,
        tensors: Vec<(String, Tensor)>,
        frozen: bool,
    ) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::init(config, vocab_size, &mut rng)?;
        model.params.assign(tensors)?;
        if frozen {
            model.params.freeze();
        }
        Ok(model)
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    pub fn embedding_table(&self) -> &Tensor {
        self.params.get(self.layout.embed)
    }

    /// Binds parameters: trainable unless frozen.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.bind(g)
    }

    /// Row gather from the embedding table.
    pub fn embed(&self, g: &mut Graph, vars: &[Var], tokens: &[usize]) -> Result<Var> {
        g.gather_rows(vars[self.layout.embed], tokens)
    }

    /// Eager embedding lookup outside any record.
    pub fn embed_tokens(&self, tokens: &[usize]) -> Result<Tensor> {
        let table = self.embedding_table();
        let d = table.cols();
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &id in tokens {
            if id >= self.vocab_size {
                return Err(Error::Vocabulary {
                    id,
                    size: self.vocab_size,
                });
            }
            out.extend_from_slice(table.row(id));
        }
        Tensor::matrix(tokens.len(), d, out)
    }

    /// Context embeddings stacked above instruction embeddings.
    pub fn encoder_inputs(
        &self,
        g: &mut Graph,
        vars: &[Var],
        context: Var,
        instruction: &[usize],
    ) -> Result<Var> {
        if instruction.is_empty() {
            return Ok(context);
        }
        let ins = self.embed(g, vars, instruction)?;
        g.concat_rows(&[context, ins])
    }

    fn add_positions(&self, g: &mut Graph, x: Var, table: Var, max_len: usize) -> Result<Var> {
        let len = g.value(x).rows();
        if len > max_len {
            return Err(Error::Contract(format!(
                "sequence of {len} exceeds maximum length {max_len}"
            )));
        }
        let pos = g.slice_rows(table, 0, len)?;
        g.add(x, pos)
    }

    /// Bidirectional encoder over real-valued input embeddings.
    pub fn encode<'m>(
        &self,
        g: &mut Graph,
        vars: &[Var],
        embeds: Var,
        key_keep: Option<&'m [bool]>,
    ) -> Result<Encoded<'m>> {
        let (len, width) = g.value(embeds).as_matrix("encode")?;
        if width != self.config.d_model {
            return Err(Error::Contract(format!(
                "encoder input width {width} does not match d_model {}",
                self.config.d_model
            )));
        }
        if let Some(k) = key_keep {
            if k.len() != len {
                return Err(Error::Contract(format!(
                    "key mask of {} for {len} positions",
                    k.len()
                )));
            }
        }
        let mask = nn::attention_mask(len, len, false, key_keep);
        let mut h = self.add_positions(
            g,
            embeds,
            vars[self.layout.enc_pos],
            self.config.max_enc_len,
        )?;
        for block in &self.layout.encoder {
            let n = nn::norm(g, vars, block.attn_norm, h)?;
            let a = nn::attention(
                g,
                vars,
                block.attn,
                n,
                n,
                self.config.n_heads,
                mask.as_deref(),
            )?;
            h = g.add(h, a)?;
            let n = nn::norm(g, vars, block.ff_norm, h)?;
            let f = nn::feed_forward(g, vars, block.ff, n)?;
            h = g.add(h, f)?;
        }
        let states = nn::norm(g, vars, self.layout.enc_norm, h)?;
        Ok(Encoded { states, key_keep })
    }

    /// Final decoder states (before the output projection).
    pub fn decode_hidden(
        &self,
        g: &mut Graph,
        vars: &[Var],
        enc: &Encoded<'_>,
        tokens: &[usize],
    ) -> Result<Var> {
        let enc_len = g.value(enc.states).rows();
        let len = tokens.len();
        let self_mask = nn::attention_mask(len, len, true, None);
        let cross_mask = nn::attention_mask(len, enc_len, false, enc.key_keep);
        let x = self.embed(g, vars, tokens)?;
        let mut h = self.add_positions(g, x, vars[self.layout.dec_pos], self.config.max_dec_len)?;
        for block in &self.layout.decoder {
            let n = nn::norm(g, vars, block.self_norm, h)?;
            let a = nn::attention(
                g,
                vars,
                block.self_attn,
                n,
                n,
                self.config.n_heads,
                self_mask.as_deref(),
            )?;
            h = g.add(h, a)?;
            let n = nn::norm(g, vars, block.cross_norm, h)?;
            let c = nn::attention(
                g,
                vars,
                block.cross_attn,
                n,
                enc.states,
                self.config.n_heads,
                cross_mask.as_deref(),
            )?;
            h = g.add(h, c)?;
            let n = nn::norm(g, vars, block.ff_norm, h)?;
            let f = nn::feed_forward(g, vars, block.ff, n)?;
            h = g.add(h, f)?;
        }
        nn::norm(g, vars, self.layout.dec_norm, h)
    }

    /// Tied output projection onto the vocabulary.
    pub fn project(&self, g: &mut Graph, vars: &[Var], hidden: Var) -> Result<Var> {
        g.matmul_nt(hidden, vars[self.layout.embed])
    }

    /// Logits `[len(decoder_tokens) × V]`; row `i` scores the token after position `i`.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        encoder_embeds: Var,
        key_keep: Option<&[bool]>,
        decoder_tokens: &[usize],
    ) -> Result<Var> {
        let enc = self.encode(g, vars, encoder_embeds, key_keep)?;
        let h = self.decode_hidden(g, vars, &enc, decoder_tokens)?;
        self.project(g, vars, h)
    }

    /// Teacher-forced cross-entropy over the target positions only.
    ///
    /// The decoder reads `[BOS] + instruction + target[..n-1]`; the rows from
    /// `len(instruction)` onward predict `target`.
    pub fn teacher_forced_loss(
        &self,
        g: &mut Graph,
        vars: &[Var],
        encoder_embeds: Var,
        key_keep: Option<&[bool]>,
        instruction: &[usize],
        target: &[usize],
    ) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::Contract("empty target sequence".into()));
        }
        let tokens = decoder_inputs(instruction, target);
        let enc = self.encode(g, vars, encoder_embeds, key_keep)?;
        let h = self.decode_hidden(g, vars, &enc, &tokens)?;
        let h = g.slice_rows(h, instruction.len(), target.len())?;
        let logits = self.project(g, vars, h)?;
        lm_loss(g, logits, target)
    }
}

/// `[BOS] + instruction + target[..n-1]`
pub fn decoder_inputs(instruction: &[usize], target: &[usize]) -> Vec<usize> {
    let mut tokens = Vec::with_capacity(1 + instruction.len() + target.len());
    tokens.push(BOS);
    tokens.extend_from_slice(instruction);
    tokens.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    tokens
}

/// Language-modelling loss: mean token cross-entropy.
pub fn lm_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    g.softmax_cross_entropy(logits, targets)
}

impl ToyLm {
    /// Teacher-forced loss of one sample whose context part is already embedded.
    pub fn sample_loss(
        &self,
        g: &mut Graph,
        vars: &[Var],
        context: Var,
        sample: &PromptSample,
    ) -> Result<Var> {
        let keep = sample.encoder_keep_mask();
        let x = self.encoder_inputs(g, vars, context, &sample.instruction)?;
        self.teacher_forced_loss(g, vars, x, Some(&keep), &sample.instruction, &sample.target)
    }

    /// Loss with a given real-valued context embedding; nothing is differentiated.
    pub fn loss_with_context(&self, context: &Tensor, sample: &PromptSample) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.params.bind_constant(&mut g);
        let ctx = g.constant(context.clone());
        let loss = self.sample_loss(&mut g, &vars, ctx, sample)?;
        Ok(g.value(loss).item())
    }

    /// Loss with the manual (token) context.
    pub fn manual_loss(&self, sample: &PromptSample) -> Result<f64> {
        self.loss_with_context(&self.embed_tokens(&sample.context)?, sample)
    }

    pub fn mean_manual_loss(&self, samples: &[PromptSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Contract("no samples to score".into()));
        }
        let mut total = 0.0;
        for s in samples {
            total += self.manual_loss(s)?;
        }
        Ok(total / samples.len() as f64)
    }
}
