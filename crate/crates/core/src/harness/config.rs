use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::interpret::DEFAULT_K;
use crate::metrics::MetricConfig;
use crate::toy_lm::{DecodeConfig, LmConfig, PretrainConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

impl PathsConfig {
    /// Resolves relative paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.corpus_dir,
            &mut self.checkpoint_dir,
            &mut self.report_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Generate the synthetic corpus instead of reading `corpus_dir`.
    pub synthetic: bool,
    pub n_train: usize,
    pub n_heldout: usize,
    /// Size of the LM's pretraining mixture and its early-stopping split.
    pub n_pretrain: usize,
    pub n_pretrain_heldout: usize,
    /// Vocabulary size including the reserved tokens.
    pub vocab_size: usize,
    pub n_ctx: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            synthetic: true,
            n_train: 200,
            n_heldout: 50,
            n_pretrain: 400,
            n_pretrain_heldout: 50,
            vocab_size: 256,
            n_ctx: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpretConfig {
    pub k: usize,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K }
    }
}

/// Everything one experiment needs, read from a single TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub lm: LmConfig,
    pub pretrain: PretrainConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub metrics: MetricConfig,
    pub interpret: InterpretConfig,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Reads `path` (or starts from defaults), applies `key=value` overrides
    /// and validates. Relative paths in the file resolve against its directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: Self = toml::Value::Table(table).try_into().map_err(config_err)?;
        if let Some(dir) = path.and_then(Path::parent) {
            cfg.paths.rebase(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.pretrain.validate()?;
        self.denoiser.validate()?;
        self.schedule.build()?;
        self.train.validate()?;
        self.decode.validate()?;
        self.metrics.validate()?;
        let c = &self.corpus;
        if c.n_train == 0 || c.n_heldout == 0 || c.n_pretrain == 0 || c.n_pretrain_heldout == 0 {
            return Err(Error::Config(
                "corpus: every split size must be positive".into(),
            ));
        }
        if c.n_ctx == 0 || c.n_ctx >= self.lm.max_enc_len {
            return Err(Error::Config(format!(
                "corpus: n_ctx {} must be positive and below lm.max_enc_len {}",
                c.n_ctx, self.lm.max_enc_len
            )));
        }
        if self.denoiser.n_ctx != c.n_ctx || self.denoiser.d_model != self.lm.d_model {
            return Err(Error::Config(format!(
                "denoiser shape {}x{} must match corpus.n_ctx {} and lm.d_model {}",
                self.denoiser.n_ctx, self.denoiser.d_model, c.n_ctx, self.lm.d_model
            )));
        }
        if self.interpret.k == 0
            || self.interpret.k > c.vocab_size.saturating_sub(crate::toy_lm::RESERVED.len())
        {
            return Err(Error::Config(
                "interpret: k must be between 1 and the non-reserved vocabulary size".into(),
            ));
        }
        Ok(())
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("no seed given".into()))
    }
}

/// Sets a dotted key in a TOML table. The value is read as TOML when it
/// parses and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {assignment:?} is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(config_err(format!(
            "override {assignment:?} has an empty key"
        )));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override {key:?}: {part} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
