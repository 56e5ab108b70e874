use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use crate::denoiser::Denoiser;
use crate::diffusion::SampleOptions;
use crate::error::{Error, Result};
use crate::interpret::{interpret_context, NeighborReport};
use crate::metrics::{evaluate, MetricReport};
use crate::numerics::Tensor;
use crate::toy_lm::{
    generate, generate_pretraining, generate_synthetic, pretrain, read_jsonl, write_jsonl,
    CorpusRecord, DecodeConfig, PretrainReport, PromptSample, ToyLm, Vocab, DEFAULT_CONTEXT,
};
use crate::trainer::{optimize_prompt, train, TrainReport};

/// Independent seed for one stage, derived from the experiment seed.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn stage_rng(seed: u64, stage: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stage_seed(seed, stage))
}

/// Where every stage reads and writes its artifacts.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub train_corpus: PathBuf,
    pub heldout_corpus: PathBuf,
    pub pretrain_corpus: PathBuf,
    pub pretrain_heldout_corpus: PathBuf,
    pub lm: PathBuf,
    pub denoiser: PathBuf,
    pub contexts: PathBuf,
    pub pretrain_report: PathBuf,
    pub train_report: PathBuf,
    pub generations: PathBuf,
    pub neighbors: PathBuf,
    pub neighbors_csv: PathBuf,
    pub report: PathBuf,
    pub report_csv: PathBuf,
}

impl Artifacts {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let (c, k, r) = (
            &cfg.paths.corpus_dir,
            &cfg.paths.checkpoint_dir,
            &cfg.paths.report_dir,
        );
        Self {
            train_corpus: c.join("train.jsonl"),
            heldout_corpus: c.join("heldout.jsonl"),
            pretrain_corpus: c.join("pretrain.jsonl"),
            pretrain_heldout_corpus: c.join("pretrain_heldout.jsonl"),
            lm: k.join("lm.ckpt"),
            denoiser: k.join("denoiser.ckpt"),
            contexts: k.join("contexts.ckpt"),
            pretrain_report: r.join("pretrain.json"),
            train_report: r.join("train.json"),
            generations: r.join("generations.jsonl"),
            neighbors: r.join("neighbors.json"),
            neighbors_csv: r.join("neighbors.csv"),
            report: r.join("experiment.json"),
            report_csv: r.join("experiment.csv"),
        }
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))
}

/// The downstream task split plus the LM's pretraining split.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<CorpusRecord>,
    pub heldout: Vec<CorpusRecord>,
    pub pretrain: Vec<CorpusRecord>,
    pub pretrain_heldout: Vec<CorpusRecord>,
}

pub fn gen_corpus(cfg: &ExperimentConfig, seed: u64) -> Result<Corpus> {
    let c = &cfg.corpus;
    let (train, heldout) = generate_synthetic(stage_seed(seed, "corpus"), c.n_train, c.n_heldout)?;
    let (pretrain, pretrain_heldout) = generate_pretraining(
        stage_seed(seed, "pretrain-corpus"),
        c.n_pretrain,
        c.n_pretrain_heldout,
        &heldout,
    )?;
    Ok(Corpus {
        train,
        heldout,
        pretrain,
        pretrain_heldout,
    })
}

pub fn save_corpus(corpus: &Corpus, art: &Artifacts) -> Result<()> {
    if let Some(dir) = art.train_corpus.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_jsonl(&art.train_corpus, &corpus.train)?;
    write_jsonl(&art.heldout_corpus, &corpus.heldout)?;
    write_jsonl(&art.pretrain_corpus, &corpus.pretrain)?;
    write_jsonl(&art.pretrain_heldout_corpus, &corpus.pretrain_heldout)
}

/// Without pretraining files the LM is pretrained on the task split itself.
pub fn load_corpus(art: &Artifacts) -> Result<Corpus> {
    let train = read_jsonl(&art.train_corpus)?;
    let heldout = read_jsonl(&art.heldout_corpus)?;
    let (pretrain, pretrain_heldout) = if art.pretrain_corpus.exists() {
        (
            read_jsonl(&art.pretrain_corpus)?,
            read_jsonl(&art.pretrain_heldout_corpus)?,
        )
    } else {
        (train.clone(), heldout.clone())
    };
    Ok(Corpus {
        train,
        heldout,
        pretrain,
        pretrain_heldout,
    })
}

/// Vocabulary over the training sides only, so held-out words may map to the
/// unknown token.
pub fn build_vocab(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Vocab> {
    let mut texts: Vec<&str> = vec![DEFAULT_CONTEXT];
    for r in corpus.train.iter().chain(&corpus.pretrain) {
        texts.extend([
            r.context_or_default(),
            r.instruction.as_str(),
            r.output.as_str(),
        ]);
    }
    Vocab::build(&texts, cfg.corpus.vocab_size)
}

pub fn to_samples(
    records: &[CorpusRecord],
    vocab: &Vocab,
    n_ctx: usize,
) -> Result<Vec<PromptSample>> {
    records
        .iter()
        .map(|r| PromptSample::from_record(r, vocab, n_ctx))
        .collect()
}

/// Initializes and pretrains the toy LM; the result is frozen.
pub fn pretrain_stage(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    seed: u64,
) -> Result<(ToyLm, Vocab, PretrainReport)> {
    let vocab = build_vocab(cfg, corpus)?;
    let train_s = to_samples(&corpus.pretrain, &vocab, cfg.corpus.n_ctx)?;
    let held_s = to_samples(&corpus.pretrain_heldout, &vocab, cfg.corpus.n_ctx)?;
    let mut rng = stage_rng(seed, "pretrain");
    let lm = ToyLm::init(cfg.lm, vocab.len(), &mut rng)?;
    let (lm, report) = pretrain(
        lm,
        &train_s,
        &held_s,
        &cfg.pretrain,
        &mut rng,
        |_, _| Ok(()),
    )?;
    Ok((lm, vocab, report))
}

/// Trains the denoiser, writing a checkpoint after every epoch when `ckpt` is given.
pub fn train_stage(
    cfg: &ExperimentConfig,
    lm: &ToyLm,
    vocab: &Vocab,
    corpus: &Corpus,
    seed: u64,
    ckpt: Option<&Path>,
) -> Result<(Denoiser, TrainReport)> {
    let samples = to_samples(&corpus.train, vocab, cfg.corpus.n_ctx)?;
    let sched = cfg.schedule.build()?;
    let mut rng = stage_rng(seed, "train");
    let denoiser = Denoiser::init(cfg.denoiser, &mut rng)?;
    train(
        denoiser,
        lm,
        &samples,
        &sched,
        &cfg.train,
        &mut rng,
        |d, _| match ckpt {
            Some(path) => Checkpoint::from_denoiser(d)?.save(path),
            None => Ok(()),
        },
    )
}

/// Samples one optimized context per held-out sample.
pub fn optimize_stage(
    cfg: &ExperimentConfig,
    lm: &ToyLm,
    vocab: &Vocab,
    denoiser: &Denoiser,
    corpus: &Corpus,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let samples = to_samples(&corpus.heldout, vocab, cfg.corpus.n_ctx)?;
    let sched = cfg.schedule.build()?;
    let opts = SampleOptions {
        stochastic: cfg.train.stochastic_sampling,
    };
    let mut rng = stage_rng(seed, "optimize");
    samples
        .iter()
        .map(|s| {
            let manual = lm.embed_tokens(&s.context)?;
            optimize_prompt(
                denoiser,
                &manual,
                &sched,
                cfg.train.sampling,
                opts,
                &mut rng,
            )
        })
        .collect()
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::dims("stack_rows", a.shape(), b.shape()));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::matrix(a.rows() + b.rows(), a.cols(), data)
}

/// Greedy output text for `s` with the given context embedding in place of
/// its token context.
pub fn decode_with_context(
    lm: &ToyLm,
    vocab: &Vocab,
    ctx: &Tensor,
    s: &PromptSample,
    decode: &DecodeConfig,
) -> Result<String> {
    let enc = stack_rows(ctx, &lm.embed_tokens(&s.instruction)?)?;
    let keep = s.encoder_keep_mask();
    let ids = generate(lm, &enc, Some(&keep), &s.instruction, decode)?;
    vocab.decode(&ids)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub instruction: String,
    pub reference: String,
    pub manual: String,
    pub optimized: String,
}

/// Greedy generations for every held-out sample under both contexts.
pub fn generate_stage(
    cfg: &ExperimentConfig,
    lm: &ToyLm,
    vocab: &Vocab,
    corpus: &Corpus,
    contexts: &[Tensor],
) -> Result<Vec<Generation>> {
    let samples = to_samples(&corpus.heldout, vocab, cfg.corpus.n_ctx)?;
    if contexts.len() != samples.len() {
        return Err(Error::Contract(format!(
            "{} optimized contexts for {} held-out samples",
            contexts.len(),
            samples.len()
        )));
    }
    samples
        .iter()
        .zip(&corpus.heldout)
        .zip(contexts)
        .map(|((s, r), ctx)| {
            Ok(Generation {
                instruction: r.instruction.clone(),
                reference: r.output.clone(),
                manual: decode_with_context(
                    lm,
                    vocab,
                    &lm.embed_tokens(&s.context)?,
                    s,
                    &cfg.decode,
                )?,
                optimized: decode_with_context(lm, vocab, ctx, s, &cfg.decode)?,
            })
        })
        .collect()
}

pub fn interpret_stage(
    cfg: &ExperimentConfig,
    lm: &ToyLm,
    vocab: &Vocab,
    contexts: &[Tensor],
) -> Result<NeighborReport> {
    let first = contexts
        .first()
        .ok_or_else(|| Error::Contract("no optimized contexts".into()))?;
    interpret_context(first, vocab, lm.embedding_table(), cfg.interpret.k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    /// Mean teacher-forced loss over the held-out samples.
    pub lm_loss: f64,
    pub lm_loss_per_sample: Vec<f64>,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub n_train: usize,
    pub n_heldout: usize,
    pub pretrain: PretrainReport,
    pub train: TrainReport,
    pub manual: ArmReport,
    pub optimized: ArmReport,
    /// Optimized minus manual, keyed by `lm_loss` and metric name.
    pub deltas: BTreeMap<String, f64>,
    pub neighbors: NeighborReport,
}

impl ExperimentReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("quantity,manual,optimized,delta\n");
        let _ = writeln!(
            out,
            "lm_loss,{},{},{}",
            self.manual.lm_loss, self.optimized.lm_loss, self.deltas["lm_loss"]
        );
        for (m, s) in &self.manual.metrics.metrics {
            let o = self.optimized.metrics.metrics[m].aggregate;
            let _ = writeln!(
                out,
                "{},{},{},{}",
                m.name(),
                s.aggregate,
                o,
                self.deltas[m.name()]
            );
        }
        out
    }
}

fn arm(
    cfg: &ExperimentConfig,
    lm: &ToyLm,
    samples: &[PromptSample],
    contexts: &[Tensor],
    outputs: &[&str],
    refs: &[&str],
) -> Result<ArmReport> {
    let lm_loss_per_sample = samples
        .iter()
        .zip(contexts)
        .map(|(s, c)| lm.loss_with_context(c, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(ArmReport {
        lm_loss: lm_loss_per_sample.iter().sum::<f64>() / samples.len() as f64,
        lm_loss_per_sample,
        metrics: evaluate(outputs, refs, &cfg.metrics)?,
    })
}

/// Scores both arms from the persisted pieces.
#[allow(clippy::too_many_arguments)]
pub fn report_stage(
    cfg: &ExperimentConfig,
    seed: u64,
    lm: &ToyLm,
    vocab: &Vocab,
    corpus: &Corpus,
    contexts: &[Tensor],
    generations: &[Generation],
    pretrain: PretrainReport,
    train: TrainReport,
    neighbors: NeighborReport,
) -> Result<ExperimentReport> {
    let samples = to_samples(&corpus.heldout, vocab, cfg.corpus.n_ctx)?;
    if generations.len() != samples.len() || contexts.len() != samples.len() {
        return Err(Error::Contract(
            "generations, contexts and held-out samples differ in count".into(),
        ));
    }
    let manual_ctx = samples
        .iter()
        .map(|s| lm.embed_tokens(&s.context))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&str> = generations.iter().map(|g| g.reference.as_str()).collect();
    let manual_out: Vec<&str> = generations.iter().map(|g| g.manual.as_str()).collect();
    let opt_out: Vec<&str> = generations.iter().map(|g| g.optimized.as_str()).collect();
    let manual = arm(cfg, lm, &samples, &manual_ctx, &manual_out, &refs)?;
    let optimized = arm(cfg, lm, &samples, contexts, &opt_out, &refs)?;
    let mut deltas = BTreeMap::new();
    deltas.insert("lm_loss".to_string(), optimized.lm_loss - manual.lm_loss);
    for (m, s) in &manual.metrics.metrics {
        deltas.insert(
            m.name().to_string(),
            optimized.metrics.metrics[m].aggregate - s.aggregate,
        );
    }
    Ok(ExperimentReport {
        seed,
        n_train: corpus.train.len(),
        n_heldout: corpus.heldout.len(),
        pretrain,
        train,
        manual,
        optimized,
        deltas,
        neighbors,
    })
}

/// Runs every stage in order, persisting each artifact under the configured
/// paths. Identical config and seed give byte-identical artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let seed = cfg.require_seed()?;
    let art = Artifacts::new(cfg);

    let corpus = if cfg.corpus.synthetic {
        let c = gen_corpus(cfg, seed).map_err(|e| e.in_stage("gen-corpus"))?;
        save_corpus(&c, &art).map_err(|e| e.in_stage("gen-corpus"))?;
        c
    } else {
        load_corpus(&art).map_err(|e| e.in_stage("gen-corpus"))?
    };

    let (lm, vocab, pre) = (|| {
        let (lm, vocab, pre) = pretrain_stage(cfg, &corpus, seed)?;
        Checkpoint::from_lm(&lm, &vocab)?.save(&art.lm)?;
        write_json(&art.pretrain_report, &pre)?;
        Ok::<_, Error>((lm, vocab, pre))
    })()
    .map_err(|e| e.in_stage("pretrain-lm"))?;

    let (denoiser, tr) = (|| {
        let (d, tr) = train_stage(cfg, &lm, &vocab, &corpus, seed, Some(&art.denoiser))?;
        Checkpoint::from_denoiser(&d)?.save(&art.denoiser)?;
        write_json(&art.train_report, &tr)?;
        Ok::<_, Error>((d, tr))
    })()
    .map_err(|e| e.in_stage("train"))?;

    let contexts = (|| {
        let c = optimize_stage(cfg, &lm, &vocab, &denoiser, &corpus, seed)?;
        Checkpoint::from_contexts(&c).save(&art.contexts)?;
        Ok::<_, Error>(c)
    })()
    .map_err(|e| e.in_stage("optimize"))?;

    let generations = (|| {
        let g = generate_stage(cfg, &lm, &vocab, &corpus, &contexts)?;
        write_jsonl(&art.generations, &g)?;
        Ok::<_, Error>(g)
    })()
    .map_err(|e| e.in_stage("generate"))?;

    let neighbors = (|| {
        let n = interpret_stage(cfg, &lm, &vocab, &contexts)?;
        write_text(&art.neighbors, &(n.to_json()? + "\n"))?;
        write_text(&art.neighbors_csv, &n.to_csv())?;
        Ok::<_, Error>(n)
    })()
    .map_err(|e| e.in_stage("interpret"))?;

    (|| {
        let r = report_stage(
            cfg,
            seed,
            &lm,
            &vocab,
            &corpus,
            &contexts,
            &generations,
            pre,
            tr,
            neighbors,
        )?;
        write_json(&art.report, &r)?;
        write_text(&art.report_csv, &r.to_csv())?;
        Ok::<_, Error>(r)
    })()
    .map_err(|e| e.in_stage("report"))
}

/// Persistence helpers for the CLI's stage-by-stage mode.
pub mod stages {
    use super::*;

    pub fn load_lm(art: &Artifacts) -> Result<(ToyLm, Vocab)> {
        Checkpoint::load(&art.lm)?.into_lm()
    }

    pub fn gen_corpus(cfg: &ExperimentConfig, seed: u64) -> Result<()> {
        let art = Artifacts::new(cfg);
        save_corpus(&super::gen_corpus(cfg, seed)?, &art)
    }

    pub fn pretrain_lm(cfg: &ExperimentConfig, seed: u64) -> Result<PretrainReport> {
        let art = Artifacts::new(cfg);
        let corpus = load_corpus(&art)?;
        let (lm, vocab, pre) = pretrain_stage(cfg, &corpus, seed)?;
        Checkpoint::from_lm(&lm, &vocab)?.save(&art.lm)?;
        write_json(&art.pretrain_report, &pre)?;
        Ok(pre)
    }

    pub fn train(cfg: &ExperimentConfig, seed: u64) -> Result<TrainReport> {
        let art = Artifacts::new(cfg);
        let corpus = load_corpus(&art)?;
        let (lm, vocab) = load_lm(&art)?;
        let (d, tr) = train_stage(cfg, &lm, &vocab, &corpus, seed, Some(&art.denoiser))?;
        Checkpoint::from_denoiser(&d)?.save(&art.denoiser)?;
        write_json(&art.train_report, &tr)?;
        Ok(tr)
    }

    pub fn optimize(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Tensor>> {
        let art = Artifacts::new(cfg);
        let corpus = load_corpus(&art)?;
        let (lm, vocab) = load_lm(&art)?;
        let d = Checkpoint::load(&art.denoiser)?.into_denoiser()?;
        let c = optimize_stage(cfg, &lm, &vocab, &d, &corpus, seed)?;
        Checkpoint::from_contexts(&c).save(&art.contexts)?;
        Ok(c)
    }

    pub fn generate(cfg: &ExperimentConfig) -> Result<Vec<Generation>> {
        let art = Artifacts::new(cfg);
        let corpus = load_corpus(&art)?;
        let (lm, vocab) = load_lm(&art)?;
        let contexts = Checkpoint::load(&art.contexts)?.into_contexts()?;
        let g = generate_stage(cfg, &lm, &vocab, &corpus, &contexts)?;
        write_jsonl(&art.generations, &g)?;
        Ok(g)
    }

    pub fn interpret(cfg: &ExperimentConfig) -> Result<NeighborReport> {
        let art = Artifacts::new(cfg);
        let (lm, vocab) = load_lm(&art)?;
        let contexts = Checkpoint::load(&art.contexts)?.into_contexts()?;
        let n = interpret_stage(cfg, &lm, &vocab, &contexts)?;
        write_text(&art.neighbors, &(n.to_json()? + "\n"))?;
        write_text(&art.neighbors_csv, &n.to_csv())?;
        Ok(n)
    }

    pub fn report(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentReport> {
        let art = Artifacts::new(cfg);
        let corpus = load_corpus(&art)?;
        let (lm, vocab) = load_lm(&art)?;
        let contexts = Checkpoint::load(&art.contexts)?.into_contexts()?;
        let generations: Vec<Generation> = read_jsonl_as(&art.generations)?;
        let pre: PretrainReport = read_json(&art.pretrain_report)?;
        let tr: TrainReport = read_json(&art.train_report)?;
        let n: NeighborReport = read_json(&art.neighbors)?;
        let r = report_stage(
            cfg,
            seed,
            &lm,
            &vocab,
            &corpus,
            &contexts,
            &generations,
            pre,
            tr,
            n,
        )?;
        write_json(&art.report, &r)?;
        write_text(&art.report_csv, &r.to_csv())?;
        Ok(r)
    }

    fn read_jsonl_as<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::Ingestion(format!("{}:{}: {e}", path.display(), i + 1)))
            })
            .collect()
    }
}
