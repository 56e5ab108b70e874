use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::PromptSample;
use super::model::ToyLm;
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            max_epochs: 80,
            patience: 10,
            min_delta: 1e-4,
            batch_size: 4,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("pretrain: lr must be positive".into()));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config(
                "pretrain: batch_size and patience must be positive".into(),
            ));
        }
        if self.min_delta.is_nan() || self.min_delta < 0.0 {
            return Err(Error::Config(
                "pretrain: min_delta must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_train_loss: f64,
    pub initial_heldout_loss: Option<f64>,
    pub train_loss: Vec<f64>,
    pub heldout_loss: Vec<f64>,
    /// 1-based epoch whose parameters were kept; 0 when none ran.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// One epoch's numbers, handed to the per-epoch callback.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: Option<f64>,
    pub improved: bool,
}

fn sample_grads(lm: &ToyLm, sample: &PromptSample) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = lm.bind(&mut g);
    let ctx = lm.embed(&mut g, &vars, &sample.context)?;
    let loss = lm.sample_loss(&mut g, &vars, ctx, sample)?;
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(lm.params().tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, grads))
}

/// Teacher-forced pretraining with held-out early stopping. The parameters of
/// the best held-out epoch are returned frozen. `on_epoch` sees the model after
/// every epoch (for checkpointing) and may abort by returning an error.
pub fn pretrain<R, F>(
    mut lm: ToyLm,
    train: &[PromptSample],
    heldout: &[PromptSample],
    cfg: &PretrainConfig,
    rng: &mut R,
    mut on_epoch: F,
) -> Result<(ToyLm, PretrainReport)>
where
    R: Rng,
    F: FnMut(&ToyLm, &EpochStats) -> Result<()>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Ingestion("pretraining corpus is empty".into()));
    }
    let mut report = PretrainReport {
        initial_train_loss: lm.mean_manual_loss(train)?,
        initial_heldout_loss: if heldout.is_empty() {
            None
        } else {
            Some(lm.mean_manual_loss(heldout)?)
        },
        train_loss: Vec::new(),
        heldout_loss: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, lm.params().tensors());
    let mut best = (
        report.initial_heldout_loss.unwrap_or(f64::INFINITY),
        lm.clone(),
    );
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (loss, grads) = sample_grads(&lm, &train[i]).map_err(|e| match e {
                    Error::NonFinite(op) => {
                        Error::Training(format!("non-finite value in {op} during epoch {epoch}"))
                    }
                    other => other,
                })?;
                total += loss;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&grads) {
                            x.add_assign(y)?;
                        }
                    }
                }
            }
            let grads: Vec<Tensor> = acc
                .unwrap_or_default()
                .into_iter()
                .map(|t| t.scale(1.0 / batch.len() as f64))
                .collect();
            let refs: Vec<&Tensor> = grads.iter().collect();
            adam.step(&mut lm.params_mut().tensors_mut(), &refs)?;
        }
        let train_loss = total / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Training(format!("loss diverged in epoch {epoch}")));
        }
        report.train_loss.push(train_loss);
        let (heldout_loss, score) = if heldout.is_empty() {
            (None, train_loss)
        } else {
            let h = lm.mean_manual_loss(heldout)?;
            report.heldout_loss.push(h);
            (Some(h), h)
        };
        let improved = score < best.0 - cfg.min_delta;
        if improved {
            best = (score, lm.clone());
            report.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        log::info!("pretrain epoch {epoch}: train {train_loss:.4} held-out {heldout_loss:?}");
        on_epoch(
            &lm,
            &EpochStats {
                epoch,
                train_loss,
                heldout_loss,
                improved,
            },
        )?;
        if stale >= cfg.patience {
            report.stopped_early = true;
            break;
        }
    }
    let mut lm = best.1;
    lm.freeze();
    Ok((lm, report))
}
