#ifndef DDPT_H
#define DDPT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum DdptStatus {
  DDPT_STATUS_OK = 0,
  DDPT_STATUS_NULL_POINTER = 1,
  DDPT_STATUS_INVALID_UTF8 = 2,
  DDPT_STATUS_BUFFER_TOO_SMALL = 3,
  DDPT_STATUS_INVALID_ARGUMENT = 4,
  DDPT_STATUS_DIMENSION = 10,
  DDPT_STATUS_VOCABULARY = 11,
  DDPT_STATUS_CONTRACT = 12,
  DDPT_STATUS_NON_FINITE = 13,
  DDPT_STATUS_CONFIG = 14,
  DDPT_STATUS_TIMESTEP = 15,
  DDPT_STATUS_INGESTION = 16,
  DDPT_STATUS_PARSE = 17,
  DDPT_STATUS_DEGENERATE = 18,
  DDPT_STATUS_TRAINING = 19,
  DDPT_STATUS_CORRUPTION = 20,
  DDPT_STATUS_COMPATIBILITY = 21,
  DDPT_STATUS_IO = 22,
  DDPT_STATUS_JSON = 23,
  DDPT_STATUS_PANIC = 99,
} DdptStatus;

/**
 * Frozen LM, its vocabulary and an optional trained denoiser.
 */
typedef struct DdptModel DdptModel;

/**
 * Opaque linear noise schedule.
 */
typedef struct DdptSchedule DdptSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Returns the buffer size the message needs.
 */
size_t ddpt_last_error(char *buf, size_t cap);

/**
 * `out` must be a valid pointer.
 */
enum DdptStatus ddpt_schedule_new(size_t steps,
                                  double beta_start,
                                  double beta_end,
                                  struct DdptSchedule **out);

/**
 * `sched` must come from [`ddpt_schedule_new`] and not be used afterwards.
 */
void ddpt_schedule_free(struct DdptSchedule *sched);

/**
 * Step count, or 0 for a null handle.
 *
 * `sched` must be null or a live handle.
 */
size_t ddpt_schedule_steps(const struct DdptSchedule *sched);

/**
 * `sched` must be a live handle and `out` a valid pointer.
 */
enum DdptStatus ddpt_schedule_alpha_bar(const struct DdptSchedule *sched, size_t t, double *out);

/**
 * `out = sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·noise`, element-wise over `len` values.
 *
 * All buffers must hold `len` doubles.
 */
enum DdptStatus ddpt_perturb(const struct DdptSchedule *sched,
                             const double *x0,
                             const double *noise,
                             size_t len,
                             size_t t,
                             double *out);

/**
 * One reverse step from an x0 prediction; `z` is the step noise.
 *
 * All buffers must hold `len` doubles.
 */
enum DdptStatus ddpt_posterior_step(const struct DdptSchedule *sched,
                                    const double *x_t,
                                    const double *x0_hat,
                                    const double *z,
                                    size_t len,
                                    size_t t,
                                    double *out);

/**
 * Cosine similarity of two `len`-vectors.
 *
 * `a` and `b` must hold `len` doubles; `out` must be valid.
 */
enum DdptStatus ddpt_cosine(const double *a, const double *b, size_t len, double *out);

/**
 * Metric ids: 0 BLEU-4, 1 chrF, 2 ROUGE-L, 3 METEOR-lite, 4 CodeBLEU-lite.
 * BLEU-4 and CodeBLEU-lite are corpus scores, the others per-sample means.
 *
 * `candidates` and `references` must each point to `n` NUL-terminated strings.
 */
enum DdptStatus ddpt_metric(int metric,
                            const char *const *candidates,
                            const char *const *references,
                            size_t n,
                            double *out);

/**
 * Checks `code` against the mini-language grammar. On a parse error the
 * 1-based position is stored in `line`/`col` (either may be null).
 *
 * `code` must be a NUL-terminated string.
 */
enum DdptStatus ddpt_parse_check(const char *code, size_t *line, size_t *col);

/**
 * Loads checkpoints written by the `ddpt` CLI. `denoiser_path` may be null,
 * in which case only manual-context generation is available. The schedule
 * must match the one the denoiser was trained with.
 *
 * Paths must be NUL-terminated strings; `sched` a live handle; `out` valid.
 */
enum DdptStatus ddpt_model_load(const char *lm_path,
                                const char *denoiser_path,
                                const struct DdptSchedule *sched,
                                size_t n_ctx,
                                struct DdptModel **out);

/**
 * `model` must come from [`ddpt_model_load`] and not be used afterwards.
 */
void ddpt_model_free(struct DdptModel *model);

/**
 * Greedy generation for one instruction under the default context. With
 * `optimized` non-zero the context is replaced by a sampled one (seeded by
 * `seed`). The text is copied into `buf` with a NUL; `written` receives the
 * size needed, and `DDPT_STATUS_BUFFER_TOO_SMALL` is returned when it does
 * not fit.
 *
 * `model` must be live, `instruction` NUL-terminated, `written` valid and
 * `buf` null or at least `cap` bytes.
 */
enum DdptStatus ddpt_model_generate(const struct DdptModel *model,
                                    const char *instruction,
                                    int optimized,
                                    uint64_t seed,
                                    char *buf,
                                    size_t cap,
                                    size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DDPT_H */
