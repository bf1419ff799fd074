#ifndef MEME_H
#define MEME_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum MemeStatus {
  MEME_STATUS_OK = 0,
  MEME_STATUS_NULL_POINTER = 1,
  MEME_STATUS_INVALID_ARGUMENT = 2,
  MEME_STATUS_SHAPE = 3,
  MEME_STATUS_OUT_OF_RANGE = 4,
  MEME_STATUS_FORMAT = 5,
  MEME_STATUS_CONFIG = 6,
  MEME_STATUS_MISSING_EXPERT = 7,
  MEME_STATUS_NUMERICAL = 8,
  MEME_STATUS_IO = 9,
  MEME_STATUS_PANIC = 10,
} MemeStatus;

// Sampler selector for [`MemeSampleParams`].
typedef enum MemeSampler {
  MEME_SAMPLER_DDPM = 0,
  MEME_SAMPLER_DDIM = 1,
} MemeSampler;

// One trained expert network.
typedef struct MemeDenoiser MemeDenoiser;

// A trained run directory with its configuration.
typedef struct MemeRun MemeRun;

// A noise schedule.
typedef struct MemeSchedule MemeSchedule;

// Generation settings for [`meme_run_sample`].
typedef struct MemeSampleParams {
  enum MemeSampler sampler;
  // Network evaluations; DDPM requires the schedule length.
  size_t steps;
  double eta;
  size_t count;
  uint64_t seed;
  // Experts held in memory at once; 0 or at least the expert count keeps
  // all of them resident.
  size_t resident_experts;
} MemeSampleParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *meme_version(void);

// Message of the last failure on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *meme_last_error_message(void);

// Forgets the last error message.
void meme_clear_last_error(void);

// Linear β schedule from `beta_start` to `beta_end` over `steps` steps.
//
// # Safety
// `out` must be a valid pointer.
enum MemeStatus meme_schedule_linear(size_t steps,
                                     double beta_start,
                                     double beta_end,
                                     struct MemeSchedule **out);

// # Safety
// `schedule` must come from [`meme_schedule_linear`] or be NULL.
void meme_schedule_free(struct MemeSchedule *schedule);

// Number of diffusion steps; 0 for a NULL handle.
//
// # Safety
// `schedule` must be a live handle or NULL.
size_t meme_schedule_steps(const struct MemeSchedule *schedule);

// ᾱ_t.
//
// # Safety
// `schedule` must be a live handle; `out` a valid pointer.
enum MemeStatus meme_schedule_alpha_bar(const struct MemeSchedule *schedule, size_t t, double *out);

// Loads a checkpoint directory.
//
// # Safety
// `dir` must be a NUL-terminated path; `out` a valid pointer.
enum MemeStatus meme_denoiser_load(const char *dir, struct MemeDenoiser **out);

// # Safety
// `model` must come from [`meme_denoiser_load`] or be NULL.
void meme_denoiser_free(struct MemeDenoiser *model);

// Total trainable scalars; 0 for a NULL handle.
//
// # Safety
// `model` must be a live handle or NULL.
size_t meme_denoiser_num_parameters(const struct MemeDenoiser *model);

// ε prediction for a batch `x_t` of shape `[n, c, h, w]` at per-item
// time-steps `ts[0..n]`; writes `n·c·h·w` floats to `out`.
//
// # Safety
// `x_t` and `out` must hold `n·c·h·w` floats and `ts` must hold `n` entries.
enum MemeStatus meme_denoiser_predict_eps(const struct MemeDenoiser *model,
                                          const float *x_t,
                                          size_t n,
                                          size_t c,
                                          size_t h,
                                          size_t w,
                                          const size_t *ts,
                                          float *out);

// Opens a run directory written by `meme train`. `config` may be NULL to use
// the copy stored in the run directory.
//
// # Safety
// `run_dir` (and `config` when not NULL) must be NUL-terminated paths; `out`
// a valid pointer.
enum MemeStatus meme_run_open(const char *run_dir, const char *config, struct MemeRun **out);

// # Safety
// `run` must come from [`meme_run_open`] or be NULL.
void meme_run_free(struct MemeRun *run);

// Number of experts; 0 for a NULL handle.
//
// # Safety
// `run` must be a live handle or NULL.
size_t meme_run_num_experts(const struct MemeRun *run);

// Writes the `[C, H, W]` image shape to `out[0..3]`.
//
// # Safety
// `run` must be a live handle; `out` must hold 3 entries.
enum MemeStatus meme_run_image_shape(const struct MemeRun *run, size_t *out);

// Generates `params.count` images into `out`, which must hold
// `out_len = count·C·H·W` floats.
//
// # Safety
// `run` must be a live handle, `params` a valid pointer and `out` must hold
// `out_len` floats.
enum MemeStatus meme_run_sample(const struct MemeRun *run,
                                const struct MemeSampleParams *params,
                                float *out,
                                size_t out_len);

// Half-diagonal Δ log-amplitude profile of one square `h × h` plane with a
// power-of-two side. Writes `h/2 + 1` entries to `freq` and `delta`.
//
// # Safety
// `plane` must hold `h·w` floats; `freq` and `delta` must hold `len` entries.
enum MemeStatus meme_spectral_profile(const float *plane,
                                      size_t h,
                                      size_t w,
                                      double *freq,
                                      double *delta,
                                      size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MEME_H */
