//! C ABI over `ddpt-core`.
//!
//! Every fallible function returns a [`DdptStatus`]; on failure the message is
//! kept per thread and can be fetched with [`ddpt_last_error`]. Handles are
//! opaque and must be released with their matching `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ddpt_core::denoiser::Denoiser;
use ddpt_core::diffusion::{forward_perturb, posterior_step_from_x0, NoiseSchedule, SampleOptions};
use ddpt_core::error::Error;
use ddpt_core::harness::{decode_with_context, Checkpoint};
use ddpt_core::interpret::cosine;
use ddpt_core::metrics::{evaluate, parse_mini, Metric, MetricConfig};
use ddpt_core::toy_lm::{CorpusRecord, DecodeConfig, PromptSample, ToyLm, Vocab};
use ddpt_core::trainer::{optimize_prompt, SampleReading};
use ddpt_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DdptStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    InvalidArgument = 4,
    Dimension = 10,
    Vocabulary = 11,
    Contract = 12,
    NonFinite = 13,
    Config = 14,
    Timestep = 15,
    Ingestion = 16,
    Parse = 17,
    Degenerate = 18,
    Training = 19,
    Corruption = 20,
    Compatibility = 21,
    Io = 22,
    Json = 23,
    Panic = 99,
}

impl From<&Error> for DdptStatus {
    fn from(e: &Error) -> Self {
        match e.root() {
            Error::Dimension { .. } => Self::Dimension,
            Error::Vocabulary { .. } => Self::Vocabulary,
            Error::Contract(_) => Self::Contract,
            Error::NonFinite(_) => Self::NonFinite,
            Error::Config(_) => Self::Config,
            Error::Timestep { .. } => Self::Timestep,
            Error::Ingestion(_) => Self::Ingestion,
            Error::Parse { .. } => Self::Parse,
            Error::Degenerate(_) => Self::Degenerate,
            Error::Training(_) => Self::Training,
            Error::Corruption(_) => Self::Corruption,
            Error::Compatibility { .. } => Self::Compatibility,
            Error::Io { .. } => Self::Io,
            Error::Json(_) => Self::Json,
            Error::Stage { .. } => Self::Contract,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(DdptStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(DdptStatus::from(&e), e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

fn fail<T>(status: DdptStatus, msg: impl Into<String>) -> FfiResult<T> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> DdptStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            DdptStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside ddpt".into());
            DdptStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(DdptStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(DdptStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(DdptStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().map_or_else(
        || fail(DdptStatus::NullPointer, format!("{what} is null")),
        Ok,
    )
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().map_or_else(
        || fail(DdptStatus::NullPointer, format!("{what} is null")),
        Ok,
    )
}

/// Copies `text` plus a terminating NUL into `buf` and returns the byte count
/// the full message needs, including the NUL. Nothing is written when `cap`
/// is too small.
fn copy_out(text: &str, buf: *mut c_char, cap: usize) -> usize {
    let need = text.len() + 1;
    if !buf.is_null() && cap >= need {
        unsafe {
            ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
            *buf.add(text.len()) = 0;
        }
    }
    need
}

/// Message of the last failed call on this thread; empty after a success.
/// Returns the buffer size the message needs.
#[no_mangle]
pub extern "C" fn ddpt_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| copy_out(&e.borrow(), buf, cap))
}

/// Opaque linear noise schedule.
pub struct DdptSchedule(NoiseSchedule);

/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ddpt_schedule_new(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    out: *mut *mut DdptSchedule,
) -> DdptStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let sched = NoiseSchedule::linear(steps, beta_start, beta_end)?;
        *out = Box::into_raw(Box::new(DdptSchedule(sched)));
        Ok(())
    })
}

/// `sched` must come from [`ddpt_schedule_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ddpt_schedule_free(sched: *mut DdptSchedule) {
    if !sched.is_null() {
        drop(Box::from_raw(sched));
    }
}

/// Step count, or 0 for a null handle.
///
/// `sched` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ddpt_schedule_steps(sched: *const DdptSchedule) -> usize {
    sched.as_ref().map_or(0, |s| s.0.steps())
}

/// `sched` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ddpt_schedule_alpha_bar(
    sched: *const DdptSchedule,
    t: usize,
    out: *mut f64,
) -> DdptStatus {
    guard(|| {
        let s = &handle(sched, "sched")?.0;
        let out = out_arg(out, "out")?;
        if t > s.steps() {
            return Err(Error::Timestep { t, max: s.steps() }.into());
        }
        *out = s.alpha_bar(t);
        Ok(())
    })
}

fn vector(data: &[f64]) -> FfiResult<Tensor> {
    Ok(Tensor::vector(data.to_vec())?)
}

/// `out = sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·noise`, element-wise over `len` values.
///
/// All buffers must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ddpt_perturb(
    sched: *const DdptSchedule,
    x0: *const f64,
    noise: *const f64,
    len: usize,
    t: usize,
    out: *mut f64,
) -> DdptStatus {
    guard(|| {
        let s = &handle(sched, "sched")?.0;
        let x0 = vector(slice_arg(x0, len, "x0")?)?;
        let noise = vector(slice_arg(noise, len, "noise")?)?;
        let y = forward_perturb(&x0, t, &noise, s)?;
        write_out(out, y.data())
    })
}

/// One reverse step from an x0 prediction; `z` is the step noise.
///
/// All buffers must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ddpt_posterior_step(
    sched: *const DdptSchedule,
    x_t: *const f64,
    x0_hat: *const f64,
    z: *const f64,
    len: usize,
    t: usize,
    out: *mut f64,
) -> DdptStatus {
    guard(|| {
        let s = &handle(sched, "sched")?.0;
        let x_t = vector(slice_arg(x_t, len, "x_t")?)?;
        let x0 = vector(slice_arg(x0_hat, len, "x0_hat")?)?;
        let z = vector(slice_arg(z, len, "z")?)?;
        let y = posterior_step_from_x0(&x_t, &x0, t, &z, s)?;
        write_out(out, y.data())
    })
}

unsafe fn write_out(out: *mut f64, data: &[f64]) -> FfiResult<()> {
    if data.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return fail(DdptStatus::NullPointer, "out is null");
    }
    ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    Ok(())
}

/// Cosine similarity of two `len`-vectors.
///
/// `a` and `b` must hold `len` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ddpt_cosine(
    a: *const f64,
    b: *const f64,
    len: usize,
    out: *mut f64,
) -> DdptStatus {
    guard(|| {
        let a = slice_arg(a, len, "a")?;
        let b = slice_arg(b, len, "b")?;
        *out_arg(out, "out")? = cosine(a, b)?;
        Ok(())
    })
}

/// Metric ids: 0 BLEU-4, 1 chrF, 2 ROUGE-L, 3 METEOR-lite, 4 CodeBLEU-lite.
/// BLEU-4 and CodeBLEU-lite are corpus scores, the others per-sample means.
///
/// `candidates` and `references` must each point to `n` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ddpt_metric(
    metric: c_int,
    candidates: *const *const c_char,
    references: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> DdptStatus {
    guard(|| {
        let m = usize::try_from(metric)
            .ok()
            .and_then(|i| Metric::ALL.get(i).copied())
            .map_or_else(
                || {
                    fail(
                        DdptStatus::InvalidArgument,
                        format!("unknown metric id {metric}"),
                    )
                },
                Ok,
            )?;
        let strings = |p: *const *const c_char, what: &str| -> FfiResult<Vec<&str>> {
            slice_arg(p, n, what)?
                .iter()
                .map(|&s| str_arg(s, what))
                .collect()
        };
        let cands = strings(candidates, "candidates")?;
        let refs = strings(references, "references")?;
        let cfg = MetricConfig {
            bleu4: m == Metric::Bleu4,
            chrf: m == Metric::Chrf,
            rouge_l: m == Metric::RougeL,
            meteor_lite: m == Metric::MeteorLite,
            codebleu_lite: m == Metric::CodebleuLite,
            ..MetricConfig::default()
        };
        let report = evaluate(&cands, &refs, &cfg)?;
        *out_arg(out, "out")? = report.aggregate(m).unwrap_or(0.0);
        Ok(())
    })
}

/// Checks `code` against the mini-language grammar. On a parse error the
/// 1-based position is stored in `line`/`col` (either may be null).
///
/// `code` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ddpt_parse_check(
    code: *const c_char,
    line: *mut usize,
    col: *mut usize,
) -> DdptStatus {
    guard(|| {
        let code = str_arg(code, "code")?;
        if let Err(e) = parse_mini(code) {
            if let Error::Parse {
                line: l, col: c, ..
            } = &e
            {
                if let Some(p) = line.as_mut() {
                    *p = *l;
                }
                if let Some(p) = col.as_mut() {
                    *p = *c;
                }
            }
            return Err(e.into());
        }
        Ok(())
    })
}

/// Frozen LM, its vocabulary and an optional trained denoiser.
pub struct DdptModel {
    lm: ToyLm,
    vocab: Vocab,
    denoiser: Option<Denoiser>,
    sched: NoiseSchedule,
    n_ctx: usize,
}

/// Loads checkpoints written by the `ddpt` CLI. `denoiser_path` may be null,
/// in which case only manual-context generation is available. The schedule
/// must match the one the denoiser was trained with.
///
/// Paths must be NUL-terminated strings; `sched` a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ddpt_model_load(
    lm_path: *const c_char,
    denoiser_path: *const c_char,
    sched: *const DdptSchedule,
    n_ctx: usize,
    out: *mut *mut DdptModel,
) -> DdptStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let sched = handle(sched, "sched")?.0.clone();
        let (lm, vocab) =
            Checkpoint::load(&PathBuf::from(str_arg(lm_path, "lm_path")?))?.into_lm()?;
        let denoiser = if denoiser_path.is_null() {
            None
        } else {
            let path = PathBuf::from(str_arg(denoiser_path, "denoiser_path")?);
            Some(Checkpoint::load(&path)?.into_denoiser()?)
        };
        if let Some(d) = &denoiser {
            if d.config().n_ctx != n_ctx || d.config().d_model != lm.config().d_model {
                return fail(
                    DdptStatus::Config,
                    format!(
                        "denoiser shape {}x{} does not match n_ctx {n_ctx} and LM width {}",
                        d.config().n_ctx,
                        d.config().d_model,
                        lm.config().d_model
                    ),
                );
            }
        }
        if n_ctx == 0 {
            return fail(DdptStatus::InvalidArgument, "n_ctx must be positive");
        }
        *out = Box::into_raw(Box::new(DdptModel {
            lm,
            vocab,
            denoiser,
            sched,
            n_ctx,
        }));
        Ok(())
    })
}

/// `model` must come from [`ddpt_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ddpt_model_free(model: *mut DdptModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Greedy generation for one instruction under the default context. With
/// `optimized` non-zero the context is replaced by a sampled one (seeded by
/// `seed`). The text is copied into `buf` with a NUL; `written` receives the
/// size needed, and `DDPT_STATUS_BUFFER_TOO_SMALL` is returned when it does
/// not fit.
///
/// `model` must be live, `instruction` NUL-terminated, `written` valid and
/// `buf` null or at least `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn ddpt_model_generate(
    model: *const DdptModel,
    instruction: *const c_char,
    optimized: c_int,
    seed: u64,
    buf: *mut c_char,
    cap: usize,
    written: *mut usize,
) -> DdptStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let written = out_arg(written, "written")?;
        let record = CorpusRecord {
            context: None,
            instruction: str_arg(instruction, "instruction")?.to_string(),
            output: String::new(),
        };
        let sample = PromptSample::from_record(&record, &m.vocab, m.n_ctx)?;
        let manual = m.lm.embed_tokens(&sample.context)?;
        let ctx = if optimized != 0 {
            let d = m
                .denoiser
                .as_ref()
                .map_or_else(|| fail(DdptStatus::Contract, "no denoiser loaded"), Ok)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            optimize_prompt(
                d,
                &manual,
                &m.sched,
                SampleReading::Additive,
                SampleOptions::default(),
                &mut rng,
            )?
        } else {
            manual
        };
        let text = decode_with_context(&m.lm, &m.vocab, &ctx, &sample, &DecodeConfig::default())?;
        *written = copy_out(&text, buf, cap);
        if buf.is_null() || cap < *written {
            return fail(
                DdptStatus::BufferTooSmall,
                format!("output needs {} bytes", *written),
            );
        }
        Ok(())
    })
}
