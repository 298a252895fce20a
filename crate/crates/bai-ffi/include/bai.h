#ifndef BAI_H
#define BAI_H

/* Generated by cbindgen from the bai-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Call outcome. Values above `BAI_STATUS_OK` match the CLI exit codes for
// the same failure families.
typedef enum BaiStatus {
  BAI_STATUS_OK = 0,
  // The call itself was malformed: null pointer, non-UTF-8 string, or an
  // output buffer too small for the result.
  BAI_STATUS_USAGE = 1,
  // Invalid configuration or parameters (includes weight-sum violations).
  BAI_STATUS_CONFIG = 2,
  // Malformed or incompatible data (bad container bytes, mismatched
  // tensor sets, series too short for a detector).
  BAI_STATUS_DATA = 3,
  // Non-finite values where finiteness is required.
  BAI_STATUS_NUMERIC = 4,
  // Filesystem failure.
  BAI_STATUS_IO = 5,
} BaiStatus;

// An in-memory checkpoint: named tensors plus string metadata.
typedef struct BaiCheckpoint BaiCheckpoint;

// Sequence-length collapse verdict; see `bai_detect_collapse`.
typedef struct BaiCollapseReport {
  bool collapsed;
  // True when an onset step was found (always true when `collapsed` is).
  bool has_onset;
  // Meaningful only when `has_onset` is true.
  size_t onset_step;
  // Minimum of the smoothed series (from the onset on, when collapsed).
  double trough_value;
} BaiCollapseReport;

// Decline-trough-recovery verdict; see `bai_detect_hockey_stick`.
typedef struct BaiHockeyStickReport {
  bool shaped;
  // Step of the smoothed global minimum (first occurrence on ties).
  size_t min_step;
  double initial;
  double trough;
  double final_value;
} BaiHockeyStickReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *bai_version(void);

// Description of the most recent failure on this thread (empty string if
// none). Valid until the next failing call on the same thread.
const char *bai_last_error(void);

// Load a checkpoint container from `path` into a fresh handle at `*out`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writes.
enum BaiStatus bai_checkpoint_load(const char *path, struct BaiCheckpoint **out);

// Write `ckpt` to `path` in the canonical container format.
//
// # Safety
// `ckpt` must be a live handle; `path` a NUL-terminated string.
enum BaiStatus bai_checkpoint_save(const struct BaiCheckpoint *ckpt, const char *path);

// Release a handle. Passing null is a no-op; passing the same handle twice
// is undefined behavior.
//
// # Safety
// `ckpt` must be null or a handle not yet freed.
void bai_checkpoint_free(struct BaiCheckpoint *ckpt);

// Number of tensors in the checkpoint.
//
// # Safety
// `ckpt` must be a live handle; `out` valid for writes.
enum BaiStatus bai_checkpoint_n_tensors(const struct BaiCheckpoint *ckpt, size_t *out);

// Hex SHA-256 of the checkpoint's canonical container bytes, written as a
// NUL-terminated string into `buf` (needs at least 65 bytes).
//
// # Safety
// `ckpt` must be a live handle; `buf` valid for `buflen` writes.
enum BaiStatus bai_checkpoint_digest(const struct BaiCheckpoint *ckpt, char *buf, size_t buflen);

// Weighted combination of `n` checkpoints: `Σ weights[i] · ckpts[i]`.
// Weights must sum to 1 within 1e-6 — they are never silently renormalized —
// and all checkpoints must carry identical tensor sets. The result holds the
// merged tensors and provenance metadata; write it to `*out`.
//
// # Safety
// `ckpts` must point to `n` live handles, `weights` to `n` doubles, and
// `out` must be valid for writes.
enum BaiStatus bai_merge_linear(const struct BaiCheckpoint *const *ckpts,
                                const double *weights,
                                size_t n,
                                struct BaiCheckpoint **out);

// Second-stage interpolation toward a base model:
// `alpha · base + (1 − alpha) · merged`, with `alpha` in [0, 1].
//
// # Safety
// `base` and `merged` must be live handles; `out` valid for writes.
enum BaiStatus bai_merge_balanced(const struct BaiCheckpoint *base,
                                  const struct BaiCheckpoint *merged,
                                  double alpha,
                                  struct BaiCheckpoint **out);

// Ground-truth episode score, independent of any learned model: +1 for a
// correct answer digit after the last answer marker, +0.2 · min(len, 40)/40
// length bonus, −0.3 if any token repeats 8+ times consecutively.
// `prompt` must be a well-formed 4-token task prompt.
//
// # Safety
// `prompt` and `response` must be valid for their stated lengths; `out`
// valid for writes.
enum BaiStatus bai_oracle_reward(const uint32_t *prompt,
                                 size_t prompt_len,
                                 const uint32_t *response,
                                 size_t response_len,
                                 double *out);

// Sequence-length collapse detector. Smooths `series` with a centered
// radius-2 moving average, then reports a collapse when the smoothed value
// falls below `drop_frac · initial` within the first `window_steps` steps
// and never exceeds `recovery_frac · initial` afterwards.
//
// # Safety
// `series` must be valid for `len` reads; `out` valid for writes.
enum BaiStatus bai_detect_collapse(const double *series,
                                   size_t len,
                                   double drop_frac,
                                   size_t window_steps,
                                   double recovery_frac,
                                   struct BaiCollapseReport *out);

// Decline-trough-recovery detector on a reward series. Smooths with a
// centered moving average of `smooth_radius`, then reports the shape when
// the global minimum sits strictly after the start, at least
// `margin_frac · (smoothed range)` below the initial value, with the final
// value at least that margin above the trough. Needs more than
// `2 · smooth_radius + 1` points.
//
// # Safety
// `series` must be valid for `len` reads; `out` valid for writes.
enum BaiStatus bai_detect_hockey_stick(const double *series,
                                       size_t len,
                                       size_t smooth_radius,
                                       double margin_frac,
                                       struct BaiHockeyStickReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BAI_H */
