#ifndef VBRNN_H
#define VBRNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Values accepted by the `objective` arguments.
 */
enum VbrnnObjective
#ifdef __cplusplus
  : uint32_t
#endif // __cplusplus
 {
  VBRNN_OBJECTIVE_LOGLIK = 0,
  VBRNN_OBJECTIVE_STEP_PARTICLE = 1,
  VBRNN_OBJECTIVE_SEQUENCE_PARTICLE = 2,
  VBRNN_OBJECTIVE_NOISY_ELBO = 3,
};
#ifndef __cplusplus
typedef uint32_t VbrnnObjective;
#endif // __cplusplus

typedef enum VbrnnStatus {
  VBRNN_STATUS_OK = 0,
  VBRNN_STATUS_NULL_POINTER = 1,
  VBRNN_STATUS_INVALID_ARGUMENT = 2,
  VBRNN_STATUS_DIMENSION_MISMATCH = 3,
  VBRNN_STATUS_IO = 4,
  VBRNN_STATUS_CHECKPOINT = 5,
  VBRNN_STATUS_NUMERIC = 6,
  VBRNN_STATUS_BUDGET_EXCEEDED = 7,
  VBRNN_STATUS_PANIC = 8,
} VbrnnStatus;

/*
 Values accepted by the `visible_kind` argument of [`vbrnn_model_new`].
 */
enum VbrnnVisibleKind
#ifdef __cplusplus
  : uint32_t
#endif // __cplusplus
 {
  VBRNN_VISIBLE_KIND_CATEGORICAL = 0,
  VBRNN_VISIBLE_KIND_GAUSSIAN = 1,
};
#ifndef __cplusplus
typedef uint32_t VbrnnVisibleKind;
#endif // __cplusplus

/*
 Opaque model handle.
 */
typedef struct VbrnnModel VbrnnModel;

typedef struct VbrnnGapReport {
  double step_form;
  double sequence_form;
  double gap;
} VbrnnGapReport;

typedef struct VbrnnJensenReport {
  double exact_loglik;
  double exact_elbo;
  double gap;
} VbrnnJensenReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the most recent failure on this thread; empty after a
 success. The pointer is valid until the next call on the same thread.
 */
const char *vbrnn_last_error(void);

/*
 Creates a model with seeded initial parameters. `sigma` is the shared
 transition noise scale (0 for deterministic dynamics).

 # Safety
 `out` must be a valid pointer to writable storage for one handle.
 */
enum VbrnnStatus vbrnn_model_new(uint32_t visible_kind,
                                 uintptr_t width,
                                 uintptr_t hidden_dim,
                                 uintptr_t n_particles,
                                 double sigma,
                                 uint64_t seed,
                                 struct VbrnnModel **out);

/*
 # Safety
 `model` must be null or a handle from this library not yet freed.
 */
void vbrnn_model_free(struct VbrnnModel *model);

/*
 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum VbrnnStatus vbrnn_model_load(const char *path, struct VbrnnModel **out);

/*
 # Safety
 `model` must be a live handle; `path` a NUL-terminated string.
 */
enum VbrnnStatus vbrnn_model_save(const struct VbrnnModel *model, const char *path);

/*
 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum VbrnnStatus vbrnn_model_n_params(const struct VbrnnModel *model, uintptr_t *out);

/*
 Copies the flattened parameters into `buf`, which must hold exactly
 `vbrnn_model_n_params` values.

 # Safety
 `buf` must point to `len` writable doubles.
 */
enum VbrnnStatus vbrnn_model_get_params(const struct VbrnnModel *model, double *buf, uintptr_t len);

/*
 # Safety
 `buf` must point to `len` readable doubles.
 */
enum VbrnnStatus vbrnn_model_set_params(struct VbrnnModel *model, const double *buf, uintptr_t len);

/*
 Objective value for one token sequence. `seed` and `n_mc` select the
 Monte-Carlo noise of the noisy bound and are ignored otherwise.

 # Safety
 `tokens` must point to `len` values; `out_value` must be writable.
 */
enum VbrnnStatus vbrnn_objective_tokens(const struct VbrnnModel *model,
                                        uint32_t objective,
                                        const uintptr_t *tokens,
                                        uintptr_t len,
                                        uint64_t seed,
                                        uintptr_t n_mc,
                                        double *out_value);

/*
 Objective value for one real-valued sequence stored step-major
 (`t_len` rows of `dim` values).

 # Safety
 `values` must point to `t_len * dim` values; `out_value` must be writable.
 */
enum VbrnnStatus vbrnn_objective_reals(const struct VbrnnModel *model,
                                       uint32_t objective,
                                       const double *values,
                                       uintptr_t t_len,
                                       uintptr_t dim,
                                       uint64_t seed,
                                       uintptr_t n_mc,
                                       double *out_value);

/*
 Step-form and sequence-form particle objectives and their difference.

 # Safety
 `tokens` must point to `len` values; `out` must be writable.
 */
enum VbrnnStatus vbrnn_gap_report_tokens(const struct VbrnnModel *model,
                                         const uintptr_t *tokens,
                                         uintptr_t len,
                                         struct VbrnnGapReport *out);

/*
 Exact log-likelihood and bound by enumerating a `grid_size`-point noise
 grid (1, 2 or 3) with the default path budget.

 # Safety
 `tokens` must point to `len` values; `out` must be writable.
 */
enum VbrnnStatus vbrnn_exact_jensen_tokens(const struct VbrnnModel *model,
                                           const uintptr_t *tokens,
                                           uintptr_t len,
                                           uintptr_t grid_size,
                                           struct VbrnnJensenReport *out);

/*
 Gradient of the objective with respect to the flattened parameters,
 written to `grad` (`vbrnn_model_n_params` values). `out_value` may be
 null.

 # Safety
 `tokens` must point to `len` values and `grad` to `grad_len` writable
 doubles.
 */
enum VbrnnStatus vbrnn_gradient_tokens(const struct VbrnnModel *model,
                                       uint32_t objective,
                                       const uintptr_t *tokens,
                                       uintptr_t len,
                                       uint64_t seed,
                                       uintptr_t n_mc,
                                       double *grad,
                                       uintptr_t grad_len,
                                       double *out_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VBRNN_H */
