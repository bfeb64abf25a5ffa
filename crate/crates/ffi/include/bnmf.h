#ifndef BNMF_H
#define BNMF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum BnmfStatus {
  BNMF_STATUS_OK = 0,
  // A required pointer argument was null.
  BNMF_STATUS_NULL_POINTER = 1,
  // Invalid parameter or configuration.
  BNMF_STATUS_CONFIG = 2,
  // Invalid or inconsistent data.
  BNMF_STATUS_DATA = 3,
  // Numerical failure inside a sampler.
  BNMF_STATUS_NUMERICAL = 4,
  // A Rust panic was caught at the boundary.
  BNMF_STATUS_PANIC = 5,
} BnmfStatus;

typedef enum BnmfModel {
  BNMF_MODEL_GEE = 0,
  BNMF_MODEL_GL12 = 1,
  BNMF_MODEL_GL22 = 2,
  BNMF_MODEL_GL_INF = 3,
  BNMF_MODEL_GL2_INF = 4,
} BnmfModel;

// Opaque handle to a data matrix with its observation mask.
typedef struct BnmfMatrix BnmfMatrix;

// Opaque handle to the result of one Gibbs chain.
typedef struct BnmfTrace BnmfTrace;

typedef struct BnmfHyperParams {
  double lambda_w;
  double lambda_z;
  double alpha_sigma;
  double beta_sigma;
} BnmfHyperParams;

typedef struct BnmfSchedule {
  size_t iterations;
  size_t burn_in;
  size_t snapshot_window;
} BnmfSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none.
// The pointer stays valid until the next failing call on the same thread.
const char *bnmf_last_error(void);

// Library version as a static NUL-terminated string.
const char *bnmf_version(void);

struct BnmfHyperParams bnmf_hyper_default(void);

struct BnmfSchedule bnmf_schedule_default(void);

// Parses a model name such as `"gl22"` (case-insensitive).
//
// # Safety
// `name` must be a NUL-terminated string and `out` a valid pointer.
enum BnmfStatus bnmf_model_from_name(const char *name, enum BnmfModel *out);

// Builds a matrix from `rows * cols` row-major values. `mask` may be null
// (fully observed); otherwise nonzero bytes mark observed cells.
//
// # Safety
// `values` (and `mask` if non-null) must point to `rows * cols` elements;
// `out` must be a valid pointer.
enum BnmfStatus bnmf_matrix_new(size_t rows,
                                size_t cols,
                                const double *values,
                                const uint8_t *mask,
                                struct BnmfMatrix **out);

// # Safety
// `m` must be null or a handle from this library not yet freed.
void bnmf_matrix_free(struct BnmfMatrix *m);

// # Safety
// `m` must be a valid handle.
size_t bnmf_matrix_rows(const struct BnmfMatrix *m);

// # Safety
// `m` must be a valid handle.
size_t bnmf_matrix_cols(const struct BnmfMatrix *m);

// # Safety
// `m` must be a valid handle.
size_t bnmf_matrix_observed(const struct BnmfMatrix *m);

// Mean squared error of a row-major prediction over the observed cells.
//
// # Safety
// `prediction` must point to `len` values; `out` must be valid.
enum BnmfStatus bnmf_masked_mse(const struct BnmfMatrix *data,
                                const double *prediction,
                                size_t len,
                                double *out);

// Splits the observed cells into training and test matrices. When the
// fraction rounds to zero held-out cells, `*test` is set to null.
//
// # Safety
// `data` must be a valid handle; `train` and `test` valid pointers.
enum BnmfStatus bnmf_holdout_split(const struct BnmfMatrix *data,
                                   double unobserved_fraction,
                                   uint64_t seed,
                                   struct BnmfMatrix **train,
                                   struct BnmfMatrix **test);

// Runs one chain. `hyper` and `schedule` may be null for the defaults.
//
// # Safety
// `data` must be a valid handle; non-null pointers must be valid.
enum BnmfStatus bnmf_run_chain(const struct BnmfMatrix *data,
                               enum BnmfModel model,
                               size_t k,
                               const struct BnmfHyperParams *hyper,
                               const struct BnmfSchedule *schedule,
                               uint64_t seed,
                               struct BnmfTrace **out);

// # Safety
// `t` must be null or a handle from this library not yet freed.
void bnmf_trace_free(struct BnmfTrace *t);

// Number of recorded iterations.
//
// # Safety
// `t` must be a valid handle.
size_t bnmf_trace_len(const struct BnmfTrace *t);

// Mean of the post-burn-in noise variance draws; NaN for a null handle.
//
// # Safety
// `t` must be a valid handle.
double bnmf_trace_posterior_sigma2(const struct BnmfTrace *t);

// Copies the per-iteration training MSE into `out[0..len]`.
//
// # Safety
// `out` must point to `len` writable doubles.
enum BnmfStatus bnmf_trace_train_mse(const struct BnmfTrace *t, double *out, size_t len);

// Copies the per-iteration noise variance draws into `out[0..len]`.
//
// # Safety
// `out` must point to `len` writable doubles.
enum BnmfStatus bnmf_trace_sigma2(const struct BnmfTrace *t, double *out, size_t len);

// Copies the row-major posterior-mean prediction (`rows * cols` values).
//
// # Safety
// `out` must point to `len` writable doubles.
enum BnmfStatus bnmf_trace_prediction(const struct BnmfTrace *t, double *out, size_t len);

// Copies the final `W` (`rows * k`) and `Z` (`k * cols`), row-major.
//
// # Safety
// `w` and `z` must point to `w_len` and `z_len` writable doubles.
enum BnmfStatus bnmf_trace_factors(const struct BnmfTrace *t,
                                   double *w,
                                   size_t w_len,
                                   double *z,
                                   size_t z_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BNMF_H */
