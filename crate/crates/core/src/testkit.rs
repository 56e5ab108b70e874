//! Small fixtures shared by unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::toy_lm::{generate_synthetic, LmConfig, PromptSample, ToyLm, Vocab};

pub struct Fixture {
    pub vocab: Vocab,
    pub lm: ToyLm,
    pub samples: Vec<PromptSample>,
}

/// Frozen random LM over a `vocab_size`-entry vocabulary and `n` samples.
pub fn fixture(n: usize, n_ctx: usize, d_model: usize, vocab_size: usize) -> Fixture {
    let (records, _) = generate_synthetic(21, n, 0).unwrap();
    let texts: Vec<String> = records
        .iter()
        .flat_map(|r| {
            [
                r.context_or_default().to_string(),
                r.instruction.clone(),
                r.output.clone(),
            ]
        })
        .collect();
    let vocab = Vocab::build(&texts, vocab_size).unwrap();
    let samples = records
        .iter()
        .map(|r| PromptSample::from_record(r, &vocab, n_ctx).unwrap())
        .collect();
    let cfg = LmConfig {
        d_model,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_heads: 2,
        d_ff: 2 * d_model,
        max_enc_len: 32,
        max_dec_len: 48,
        init_std: 0.2,
    };
    let mut lm = ToyLm::init(cfg, vocab.len(), &mut ChaCha8Rng::seed_from_u64(22)).unwrap();
    lm.freeze();
    Fixture { vocab, lm, samples }
}

pub fn denoiser(n_ctx: usize, d_model: usize, d_low: usize, seed: u64) -> Denoiser {
    let cfg = DenoiserConfig {
        n_ctx,
        d_model,
        d_low,
        n_layers: 1,
        n_heads: 2,
        d_ff: 2 * d_low,
        init_std: 0.2,
    };
    Denoiser::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Replaces the zero up-projection (and all biases) with random values.
pub fn perturb(d: &mut Denoiser, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = d.params().names().iter().map(|s| s.to_string()).collect();
    for (i, name) in names.iter().enumerate() {
        if name.starts_with("up") || name.ends_with("bias") {
            let shape = d.params().get(i).shape().to_vec();
            *d.params_mut().get_mut(i) = crate::Tensor::randn(&shape, 0.2, &mut rng);
        }
    }
}
