//! The frozen toy language model: vocabulary, corpus, encoder-decoder,
//! pretraining and greedy decoding.

mod corpus;
mod generate;
mod model;
mod pretrain;
mod vocab;

pub use corpus::{
    generate_pretraining, generate_synthetic, read_jsonl, write_jsonl, CorpusRecord, PromptSample,
    DEFAULT_CONTEXT, EXPLICIT_CONTEXTS, PLAIN_CONTEXTS,
};
pub use generate::{adjust_logits, generate, greedy_decode, DecodeConfig};
pub use model::{decoder_inputs, lm_loss, Encoded, LmConfig, ToyLm};
pub use pretrain::{pretrain, EpochStats, PretrainConfig, PretrainReport};
pub use vocab::{Vocab, BOS, EOS, PAD, RESERVED, UNK};
