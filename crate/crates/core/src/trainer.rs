//! The DDPT training loop: perturb the context embedding, denoise it into a
//! direction, score the shifted prompt with the frozen LM, repeat `k` times
//! from the prediction, and update the denoiser.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{perturb_with, sample_chain, NoiseSchedule, SampleOptions};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Graph, Precision, Tensor, Var};
use crate::toy_lm::{PromptSample, ToyLm};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    LmOnly,
    LmPlusX0,
}

/// What the next inner pass perturbs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainBase {
    /// The denoiser's raw prediction `P̂_start`.
    #[default]
    Prediction,
    /// The shifted prompt `P̂_start + P_start`.
    Shifted,
}

/// How a sampled chain output becomes a context embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleReading {
    /// Direction added to the manual context embedding.
    #[default]
    Additive,
    /// The sample is the context embedding itself.
    Absolute,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub k: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub objective: Objective,
    pub x0_loss_weight: f64,
    pub chain_base: ChainBase,
    /// Backpropagate through the chain of inner passes instead of detaching.
    pub full_backprop: bool,
    /// Stop when the mean LM loss improved by less than this fraction over
    /// `window` epochs. A zero window trains for all `epochs`.
    pub tolerance: f64,
    pub window: usize,
    pub sampling: SampleReading,
    pub stochastic_sampling: bool,
    /// Samples whose gradients are averaged per optimizer step.
    pub batch_size: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 3,
            epochs: 30,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            objective: Objective::LmOnly,
            x0_loss_weight: 1.0,
            chain_base: ChainBase::Prediction,
            full_backprop: false,
            tolerance: 1e-4,
            window: 0,
            sampling: SampleReading::Additive,
            stochastic_sampling: true,
            batch_size: 1,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "train: k and batch_size must be at least 1".into(),
            ));
        }
        if !(self.x0_loss_weight >= 0.0 && self.x0_loss_weight.is_finite()) {
            return Err(Error::Config(
                "train: x0_loss_weight must be finite and non-negative".into(),
            ));
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 {
            return Err(Error::Config(
                "train: tolerance must be non-negative".into(),
            ));
        }
        self.adam.validate()
    }
}

/// Context and instruction ids of a sample.
pub fn split_prompt(sample: &PromptSample) -> (&[usize], &[usize]) {
    sample.split()
}

/// One inner pass as seen by instrumentation.
#[derive(Clone, Debug, PartialEq)]
pub struct PassTrace {
    pub t: usize,
    /// The embedding that was perturbed.
    pub base: Tensor,
    pub prediction: Tensor,
    pub lm_loss: f64,
    pub x0_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// Mean over the inner passes of the per-pass objective.
    pub loss: f64,
    pub lm_loss: f64,
    pub x0_loss: Option<f64>,
    pub passes: Vec<PassTrace>,
}

/// Records one training step on `g`; returns the scalar objective.
#[allow(clippy::too_many_arguments)]
pub fn record_step<R: Rng + ?Sized>(
    g: &mut Graph,
    vars: &[Var],
    denoiser: &Denoiser,
    lm: &ToyLm,
    sample: &PromptSample,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Var, StepOutcome)> {
    cfg.validate()?;
    let (context, instruction) = split_prompt(sample);
    let lm_vars = lm.params().bind_constant(g);
    let manual = lm.embed_tokens(context)?;
    let manual_var = g.constant(manual.clone());
    let instruction_embeds = g.constant(lm.embed_tokens(instruction)?);
    let keep = sample.encoder_keep_mask();
    let shape = manual.shape().to_vec();
    let mut start = manual_var;
    let mut passes = Vec::with_capacity(cfg.k);
    let mut terms = Vec::with_capacity(cfg.k);
    let (mut lm_total, mut x0_total) = (0.0, 0.0);
    for _ in 0..cfg.k {
        let t = rng.random_range(1..=sched.steps());
        let noise = Tensor::randn(&shape, 1.0, rng);
        let ab = sched.alpha_bar(t);
        let p_t = if cfg.full_backprop && g.needs_grad(start) {
            let signal = g.scale(start, ab.sqrt())?;
            let noise = g.constant(noise.scale((1.0 - ab).sqrt()));
            g.add(signal, noise)?
        } else {
            g.constant(perturb_with(g.value(start), &noise, ab)?)
        };
        let prediction = denoiser.forward(g, vars, p_t, t)?;
        let shifted = g.add(prediction, start)?;
        let encoder_in = g.concat_rows(&[shifted, instruction_embeds])?;
        let lm_loss = lm.teacher_forced_loss(
            g,
            &lm_vars,
            encoder_in,
            Some(&keep),
            instruction,
            &sample.target,
        )?;
        let lm_value = g.value(lm_loss).item();
        lm_total += lm_value;
        let (term, x0_value) = match cfg.objective {
            Objective::LmOnly => (lm_loss, None),
            Objective::LmPlusX0 => {
                let diff = g.sub(prediction, manual_var)?;
                let sq = g.sum_squares(diff)?;
                let x0 = g.value(sq).item();
                x0_total += x0;
                let weighted = g.scale(sq, cfg.x0_loss_weight)?;
                (g.add(lm_loss, weighted)?, Some(x0))
            }
        };
        terms.push(term);
        passes.push(PassTrace {
            t,
            base: g.value(start).clone(),
            prediction: g.value(prediction).clone(),
            lm_loss: lm_value,
            x0_loss: x0_value,
        });
        let next = match cfg.chain_base {
            ChainBase::Prediction => prediction,
            ChainBase::Shifted => shifted,
        };
        start = if cfg.full_backprop {
            next
        } else {
            g.detach(next)
        };
    }
    let mut total = terms[0];
    for &term in &terms[1..] {
        total = g.add(total, term)?;
    }
    let k = cfg.k as f64;
    let loss = g.scale(total, 1.0 / k)?;
    let outcome = StepOutcome {
        loss: g.value(loss).item(),
        lm_loss: lm_total / k,
        x0_loss: (cfg.objective == Objective::LmPlusX0).then_some(x0_total / k),
        passes,
    };
    Ok((loss, outcome))
}

/// One DDPT step: loss, per-parameter gradients and the pass trace.
pub fn ddpt_step<R: Rng + ?Sized>(
    denoiser: &Denoiser,
    lm: &ToyLm,
    sample: &PromptSample,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(StepOutcome, Vec<Tensor>)> {
    let mut g = Graph::with_precision(cfg.precision);
    let vars = denoiser.bind(&mut g);
    let (loss, outcome) = record_step(&mut g, &vars, denoiser, lm, sample, sched, cfg, rng)?;
    let mut grads = g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(denoiser.params().tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((outcome, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub lm_loss: Vec<f64>,
    /// Empty unless the objective includes the reconstruction term.
    pub x0_loss: Vec<f64>,
    pub converged_early: bool,
    /// Parameters whose gradient was exactly zero on every sample.
    pub dead_parameters: Vec<String>,
    pub lm_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_checkpoint: Option<String>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Numbers handed to the per-epoch callback.
#[derive(Clone, Copy, Debug)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub lm_loss: f64,
    pub x0_loss: Option<f64>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn converged(series: &[f64], window: usize, tol: f64) -> bool {
    if window == 0 || series.len() <= window {
        return false;
    }
    let then = series[series.len() - 1 - window];
    let now = series[series.len() - 1];
    (then - now) / then.abs().max(f64::MIN_POSITIVE) < tol
}

/// Trains the denoiser against the frozen LM. The LM digest is checked after
/// the run; any change is a contract violation.
pub fn train<R, F>(
    mut denoiser: Denoiser,
    lm: &ToyLm,
    data: &[PromptSample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
    mut on_epoch: F,
) -> Result<(Denoiser, TrainReport)>
where
    R: Rng,
    F: FnMut(&Denoiser, &TrainEpoch) -> Result<()>,
{
    cfg.validate()?;
    if !lm.is_frozen() {
        return Err(Error::Contract(
            "DDPT requires a frozen language model".into(),
        ));
    }
    if data.is_empty() && cfg.epochs > 0 {
        return Err(Error::Ingestion("training set is empty".into()));
    }
    let clock = Instant::now();
    let digest = lm.params().digest();
    let mut adam = AdamState::new(cfg.adam, denoiser.params().tensors());
    let mut touched = vec![false; denoiser.params().len()];
    let mut report = TrainReport {
        lm_loss: Vec::new(),
        x0_loss: Vec::new(),
        converged_early: false,
        dead_parameters: Vec::new(),
        lm_digest: hex(&digest),
        final_checkpoint: None,
        wall_time_secs: 0.0,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let (mut lm_sum, mut x0_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (outcome, grads) = ddpt_step(&denoiser, lm, &data[i], sched, cfg, rng)
                    .map_err(|e| match e {
                        Error::NonFinite(op) => Error::Training(format!(
                            "non-finite value in {op} during epoch {epoch}"
                        )),
                        other => other,
                    })?;
                if !outcome.loss.is_finite() {
                    return Err(Error::Training(format!("loss diverged in epoch {epoch}")));
                }
                lm_sum += outcome.lm_loss;
                x0_sum += outcome.x0_loss.unwrap_or(0.0);
                for (flag, g) in touched.iter_mut().zip(&grads) {
                    *flag |= g.data().iter().any(|&v| v != 0.0);
                }
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&grads) {
                            x.add_assign(y)?;
                        }
                    }
                }
            }
            let mut grads = acc.unwrap_or_default();
            if batch.len() > 1 {
                let inv = 1.0 / batch.len() as f64;
                for g in &mut grads {
                    *g = g.scale(inv);
                }
            }
            let refs: Vec<&Tensor> = grads.iter().collect();
            adam.step(&mut denoiser.params_mut().tensors_mut(), &refs)
                .map_err(|e| {
                    Error::Training(format!("optimizer step failed in epoch {epoch}: {e}"))
                })?;
        }
        let n = data.len() as f64;
        let lm_loss = lm_sum / n;
        report.lm_loss.push(lm_loss);
        let x0_loss = (cfg.objective == Objective::LmPlusX0).then_some(x0_sum / n);
        if let Some(x) = x0_loss {
            report.x0_loss.push(x);
        }
        log::info!("ddpt epoch {epoch}: lm loss {lm_loss:.5}");
        on_epoch(
            &denoiser,
            &TrainEpoch {
                epoch,
                lm_loss,
                x0_loss,
            },
        )?;
        if converged(&report.lm_loss, cfg.window, cfg.tolerance) {
            report.converged_early = epoch < cfg.epochs;
            break;
        }
    }
    if lm.params().digest() != digest {
        return Err(Error::Contract(
            "frozen language model changed during training".into(),
        ));
    }
    if !report.lm_loss.is_empty() {
        report.dead_parameters = denoiser
            .params()
            .names()
            .into_iter()
            .zip(&touched)
            .filter(|(_, &t)| !t)
            .map(|(n, _)| n.to_string())
            .collect();
    }
    report.wall_time_secs = clock.elapsed().as_secs_f64();
    Ok((denoiser, report))
}

/// Samples a direction from noise and turns it into a context embedding.
pub fn optimize_prompt<R: Rng + ?Sized>(
    denoiser: &Denoiser,
    manual_context: &Tensor,
    sched: &NoiseSchedule,
    reading: SampleReading,
    opts: SampleOptions,
    rng: &mut R,
) -> Result<Tensor> {
    let sample = sample_chain(denoiser, manual_context.shape(), sched, rng, opts)?;
    match reading {
        SampleReading::Additive => manual_context.add(&sample),
        SampleReading::Absolute => Ok(sample),
    }
}

#[cfg(test)]
mod tests;
