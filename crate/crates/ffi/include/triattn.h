#ifndef TRIATTN_H
#define TRIATTN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define TRIATTN_VARIANT_TADD 0

#define TRIATTN_VARIANT_TDP 1

#define TRIATTN_VARIANT_TSDP 2

#define TRIATTN_VARIANT_TRILI_FULL 3

#define TRIATTN_VARIANT_TRILI_ECON 4

#define TRIATTN_INTEGRATION_ADD 0

#define TRIATTN_INTEGRATION_MUL 1

#define TRIATTN_INTEGRATION_BILI 2

#define TRIATTN_BI_ADD 0

#define TRIATTN_BI_DP 1

#define TRIATTN_BI_SDP 2

#define TRIATTN_BI_BILI 3

typedef enum TriattnStatus {
  TRIATTN_STATUS_OK = 0,
  TRIATTN_STATUS_NULL_POINTER = 1,
  TRIATTN_STATUS_INVALID_ARGUMENT = 2,
  TRIATTN_STATUS_SHAPE = 3,
  TRIATTN_STATUS_CAPACITY = 4,
  TRIATTN_STATUS_NON_FINITE = 5,
  TRIATTN_STATUS_DIVERGED = 6,
  TRIATTN_STATUS_IO = 7,
  TRIATTN_STATUS_PARSE = 8,
  TRIATTN_STATUS_PANIC = 9,
} TriattnStatus;

/**
 * Parameters of one bi-attention score.
 */
typedef struct TriattnBiParams TriattnBiParams;

/**
 * A trained matching model.
 */
typedef struct TriattnModel TriattnModel;

/**
 * Parameters of one tri-attention score / integration pair.
 */
typedef struct TriattnParams TriattnParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *triattn_last_error(void);

/**
 * Fan-in uniform parameters for `variant` / `integration` at width `d`.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum TriattnStatus triattn_params_new(uint32_t variant,
                                      uint32_t integration_code,
                                      size_t d,
                                      uint64_t seed,
                                      struct TriattnParams **out);

/**
 * # Safety
 * `params` must come from [`triattn_params_new`] and not be freed yet, or
 * be NULL.
 */
void triattn_params_free(struct TriattnParams *params);

/**
 * Contextual attention embedding of `q` (length `d`) into `out` (length `d`).
 *
 * # Safety
 * Array arguments must hold `d`, `n_keys * d`, `n_keys * d`, `n_ctx * d`
 * and `d` elements.
 */
enum TriattnStatus triattn_tri_attend(const struct TriattnParams *params,
                                      const double *q,
                                      const double *keys,
                                      const double *values,
                                      size_t n_keys,
                                      const double *ctx,
                                      size_t n_ctx,
                                      double *out);

/**
 * Normalised `n_keys x n_ctx` weight grid into `out`.
 *
 * # Safety
 * Array arguments must hold `d`, `n_keys * d`, `n_ctx * d` and
 * `n_keys * n_ctx` elements.
 */
enum TriattnStatus triattn_tri_weights(const struct TriattnParams *params,
                                       const double *q,
                                       const double *keys,
                                       size_t n_keys,
                                       const double *ctx,
                                       size_t n_ctx,
                                       double *out);

/**
 * Fan-in uniform bi-attention parameters at width `d`.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum TriattnStatus triattn_bi_params_new(uint32_t variant,
                                         size_t d,
                                         uint64_t seed,
                                         struct TriattnBiParams **out);

/**
 * # Safety
 * `params` must come from [`triattn_bi_params_new`] and not be freed yet,
 * or be NULL.
 */
void triattn_bi_params_free(struct TriattnBiParams *params);

/**
 * Bi-attention embedding of `q` into `out` (both length `d`).
 *
 * # Safety
 * Array arguments must hold `d`, `n_keys * d`, `n_keys * d` and `d`
 * elements.
 */
enum TriattnStatus triattn_bi_attend(const struct TriattnBiParams *params,
                                     const double *q,
                                     const double *keys,
                                     const double *values,
                                     size_t n_keys,
                                     double *out);

/**
 * Loads a model saved by `triattn train --out`.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` a valid handle slot.
 */
enum TriattnStatus triattn_model_load(const char *path, struct TriattnModel **out);

/**
 * # Safety
 * `model` must come from [`triattn_model_load`] and not be freed yet, or
 * be NULL.
 */
void triattn_model_free(struct TriattnModel *model);

/**
 * Class probabilities for one token-id pair into `probs` (length 2).
 *
 * # Safety
 * `seq_a` / `seq_b` must hold `len_a` / `len_b` elements, `probs` two.
 */
enum TriattnStatus triattn_model_predict(const struct TriattnModel *model,
                                         const uint32_t *seq_a,
                                         size_t len_a,
                                         const uint32_t *seq_b,
                                         size_t len_b,
                                         double *probs);

/**
 * Gradient check of one variant / integration pair with `n_keys` keys and
 * `n_ctx` context vectors. The JSON report is written to `out` and must be
 * released with [`triattn_string_free`]; `pass` receives 1 or 0.
 *
 * # Safety
 * `out` and `pass` must be valid, writable pointers.
 */
enum TriattnStatus triattn_gradcheck_json(uint32_t variant,
                                          uint32_t integration_code,
                                          size_t d,
                                          size_t n_keys,
                                          size_t n_ctx,
                                          uint64_t seed,
                                          char **out,
                                          int32_t *pass);

/**
 * # Safety
 * `s` must come from this library and not be freed yet, or be NULL.
 */
void triattn_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRIATTN_H */
