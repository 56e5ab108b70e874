//! Experiment harness: configuration, checkpoints and the staged pipeline.

mod checkpoint;
mod config;
mod pipeline;
#[cfg(test)]
mod tests;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{apply_override, CorpusConfig, ExperimentConfig, InterpretConfig, PathsConfig};
pub use pipeline::{
    build_vocab, decode_with_context, gen_corpus, generate_stage, interpret_stage, load_corpus,
    optimize_stage, pretrain_stage, read_json, report_stage, run_experiment, save_corpus,
    stage_seed, stages, to_samples, train_stage, write_text, ArmReport, Artifacts, Corpus,
    ExperimentReport, Generation,
};
