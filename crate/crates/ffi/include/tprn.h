#ifndef TPRN_H
#define TPRN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum TprnStatus {
  TPRN_STATUS_OK = 0,
  TPRN_STATUS_NULL_ARGUMENT = 1,
  /**
   * Buffer length or dimension mismatch.
   */
  TPRN_STATUS_INVALID_ARGUMENT = 2,
  TPRN_STATUS_CONFIG = 3,
  TPRN_STATUS_IO = 4,
  /**
   * Corrupt, truncated or incompatible checkpoint.
   */
  TPRN_STATUS_CHECKPOINT = 5,
  TPRN_STATUS_NUMERICAL = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  TPRN_STATUS_PANIC = 7,
} TprnStatus;

/**
 * Opaque model handle.
 */
typedef struct TprnModel TprnModel;

/**
 * Model dimensions.
 */
typedef struct TprnHyper {
  size_t n_symbols;
  size_t n_roles;
  size_t d_symbols;
  size_t d_roles;
  size_t d_word;
  bool gate_enabled;
  bool gated_feedback;
} TprnHyper;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after success.
 */
const char *tprn_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tprn_version(void);

/**
 * Loads a checkpoint file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TprnStatus tprn_model_load(const char *path, struct TprnModel **out);

/**
 * Fresh token-classification model with `n_labels` outputs.
 *
 * # Safety
 * `hyper` and `out` must be valid pointers.
 */
enum TprnStatus tprn_model_init(const struct TprnHyper *hyper,
                                size_t n_labels,
                                uint64_t seed,
                                struct TprnModel **out);

/**
 * Writes the model (without optimizer state) as a checkpoint.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum TprnStatus tprn_model_save(const struct TprnModel *model, const char *path);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void tprn_model_free(struct TprnModel *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum TprnStatus tprn_model_dims(const struct TprnModel *model, struct TprnHyper *out);

/**
 * Runs both cells over `n_tokens` word vectors (`inputs` is
 * `d_word x n_tokens`, column-major).
 *
 * Per token, in token order, writes forward-cell attention to `a_s`
 * (`n_symbols x n_tokens`) and `a_r` (`n_roles x n_tokens`), and the
 * concatenated bidirectional output to `outputs`
 * (`2 d_symbols d_roles x n_tokens`). Each `*_len` is the buffer length in
 * values and must match exactly. Any output pointer may be NULL with
 * length 0 to skip it.
 *
 * # Safety
 * Buffers must be valid for their stated lengths.
 */
enum TprnStatus tprn_model_run(const struct TprnModel *model,
                               const double *inputs,
                               size_t n_tokens,
                               size_t inputs_len,
                               double *a_s,
                               size_t a_s_len,
                               double *a_r,
                               size_t a_r_len,
                               double *outputs,
                               size_t outputs_len);

/**
 * Quantization penalty of one attention vector:
 * `sum a_i^2 (1 - a_i)^2 + (sum a_i^2 - 1)^2`.
 *
 * # Safety
 * `a` must hold `n` values; `out` must be valid.
 */
enum TprnStatus tprn_q_penalty(const double *a, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TPRN_H */
