/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef SUPERACT_H
#define SUPERACT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Token-score aggregation inside the attribution objective.
 */
typedef enum SaAggregation {
  SA_AGGREGATION_MEAN = 0,
  SA_AGGREGATION_MAX = 1,
} SaAggregation;

/**
 * Result code of every call.
 */
typedef enum SaStatus {
  SA_STATUS_OK = 0,
  SA_STATUS_NULL_POINTER = 1,
  SA_STATUS_INVALID_ARGUMENT = 2,
  SA_STATUS_INVALID_ARCHIVE = 3,
  SA_STATUS_IO = 4,
  SA_STATUS_DIMENSION_MISMATCH = 5,
  SA_STATUS_NO_POSITIVE_SAMPLES = 6,
  SA_STATUS_UNKNOWN_CONCEPT = 7,
  SA_STATUS_INTERNAL = 8,
  SA_STATUS_PANIC = 9,
} SaStatus;

/**
 * Opaque handle to a validated archive.
 */
typedef struct SaArchive SaArchive;

/**
 * A calibrated SuperActivator detector. `layer_index` indexes the layer
 * arrays passed to [`sa_calibrate_superactivator`].
 */
typedef struct SaDetector {
  size_t layer_index;
  double delta;
  double tau;
  double calibration_f1;
} SaDetector;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *sa_last_error(void);

/**
 * Opens and validates the archive directory `dir`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SaStatus sa_archive_open(const char *dir, struct SaArchive **out);

/**
 * Releases a handle from [`sa_archive_open`]. Null is a no-op.
 *
 * # Safety
 * `archive` must be null or an unreleased handle.
 */
void sa_archive_free(struct SaArchive *archive);

/**
 * # Safety
 * `archive` must be a live handle and `out` writable.
 */
enum SaStatus sa_archive_dim(const struct SaArchive *archive, size_t *out);

/**
 * # Safety
 * `archive` must be a live handle and `out` writable.
 */
enum SaStatus sa_archive_num_samples(const struct SaArchive *archive, size_t *out);

/**
 * Nearest-rank `q`-quantile of `n` scores.
 *
 * # Safety
 * `scores` must hold `n` values and `out` be writable.
 */
enum SaStatus sa_empirical_quantile(const double *scores, size_t n, double q, double *out);

/**
 * Threshold keeping the top `delta` fraction of in-concept scores.
 *
 * # Safety
 * `scores` must hold `n` values and `out` be writable.
 */
enum SaStatus sa_superactivator_threshold(const double *scores,
                                          size_t n,
                                          double delta,
                                          double *out);

/**
 * Selects the layer and sparsity level with the best validation F1.
 * `archives[i]` is paired with concept vector `vectors[i]`, each of length
 * that archive's dimension.
 *
 * # Safety
 * `archives` and `vectors` must hold `n_layers` valid pointers,
 * `concept_id` must be a NUL-terminated string, `delta_grid` must hold
 * `n_grid` values and `out` be writable.
 */
enum SaStatus sa_calibrate_superactivator(const struct SaArchive *const *archives,
                                          const double *const *vectors,
                                          size_t n_layers,
                                          const char *concept_id,
                                          const double *delta_grid,
                                          size_t n_grid,
                                          struct SaDetector *out);

/**
 * KernelSHAP values of the token game `f(M) = agg_i [M_i] <z_i, target>`
 * for a row-major `n_tokens x dim` token matrix. Uses full enumeration
 * when `2^n - 2 <= n_perturb`, sampling seeded by `seed` otherwise.
 *
 * # Safety
 * `tokens` must hold `n_tokens * dim` values, `target` `dim` values and
 * `out_phi` must have room for `n_tokens` values.
 */
enum SaStatus sa_kernel_shap(const double *tokens,
                             size_t n_tokens,
                             size_t dim,
                             const double *target,
                             enum SaAggregation aggregation,
                             size_t n_perturb,
                             uint64_t seed,
                             double *out_phi);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SUPERACT_H */
