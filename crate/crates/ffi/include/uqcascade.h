#ifndef UQCASCADE_H
#define UQCASCADE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UqcStatus {
  UQC_STATUS_OK = 0,
  UQC_STATUS_NULL_POINTER = 1,
  UQC_STATUS_INVALID_ARGUMENT = 2,
  UQC_STATUS_IO = 3,
  UQC_STATUS_DATA = 4,
  UQC_STATUS_UNSATISFIABLE = 5,
  UQC_STATUS_BUFFER_TOO_SMALL = 6,
  UQC_STATUS_PANIC = 7,
} UqcStatus;

/**
 * Uncertainty score and prefix combination.
 */
typedef enum UqcScore {
  /**
   * Negative MSP of the mean softmax.
   */
  UQC_SCORE_NEG_MSP_PREDICTIVE = 0,
  /**
   * Mean of the members' negative MSP.
   */
  UQC_SCORE_NEG_MSP_MEMBER_MEAN = 1,
  /**
   * Mean of the members' energies.
   */
  UQC_SCORE_ENERGY_MEMBER_MEAN = 2,
} UqcScore;

/**
 * Opaque exit policy.
 */
typedef struct UqcPolicy UqcPolicy;

/**
 * Opaque score table.
 */
typedef struct UqcTable UqcTable;

/**
 * Opaque cascade trace.
 */
typedef struct UqcTrace UqcTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *uqc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *uqc_version(void);

/**
 * Loads a table from a UQC1 binary or CSV file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum UqcStatus uqc_table_read(const char *path, struct UqcTable **out);

/**
 * Parses a table from an in-memory UQC1 image.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` must be writable.
 */
enum UqcStatus uqc_table_from_bytes(const uint8_t *data, size_t len, struct UqcTable **out);

/**
 * Generates a synthetic table with `n_stages` stages of unit cost.
 * `signal` holds one strictly increasing evidence scale per stage.
 *
 * # Safety
 * `signal` must point to `n_stages` values and `out` must be writable.
 */
enum UqcStatus uqc_table_synth(size_t n_classes,
                               size_t n_id,
                               size_t n_ood,
                               const double *signal,
                               size_t n_stages,
                               double sigma,
                               double rho,
                               uint64_t seed,
                               struct UqcTable **out);

/**
 * Writes the table as a UQC1 file.
 *
 * # Safety
 * `table` must be a live handle and `path` a NUL-terminated string.
 */
enum UqcStatus uqc_table_write(const struct UqcTable *table, const char *path);

/**
 * # Safety
 * `table` must be NULL or a handle not yet freed.
 */
void uqc_table_free(struct UqcTable *table);

/**
 * Sample, class and stage counts. Any output pointer may be NULL.
 *
 * # Safety
 * `table` must be a live handle; non-NULL outputs must be writable.
 */
enum UqcStatus uqc_table_dims(const struct UqcTable *table,
                              size_t *n_samples,
                              size_t *n_classes,
                              size_t *n_stages);

/**
 * Labels (`-1` for OOD) and domain flags (0 ID, 1 OOD). Either output may
 * be NULL; otherwise it must hold at least `n_samples` elements.
 *
 * # Safety
 * `table` must be a live handle; outputs must hold `len` elements.
 */
enum UqcStatus uqc_table_labels(const struct UqcTable *table,
                                int32_t *labels,
                                uint8_t *domains,
                                size_t len);

/**
 * Uncertainty and prediction of the ensemble of stages `1..=prefix_len`.
 * Either output may be NULL.
 *
 * # Safety
 * `table` must be a live handle; outputs must hold `len` elements.
 */
enum UqcStatus uqc_prefix_evaluate(const struct UqcTable *table,
                                   enum UqcScore score,
                                   size_t prefix_len,
                                   double *uncertainty,
                                   uint32_t *prediction,
                                   size_t len);

/**
 * Builds a window policy: exit `m` stops a sample whose uncertainty lies
 * outside `[lo[m], hi[m]]`. Use -INFINITY/INFINITY for open sides and
 * `lo = hi = INFINITY` for an exit that stops everything.
 *
 * # Safety
 * `lo` and `hi` must hold `n_exits` values; `out` must be writable.
 */
enum UqcStatus uqc_policy_windows(enum UqcScore score,
                                  const double *lo,
                                  const double *hi,
                                  size_t n_exits,
                                  struct UqcPolicy **out);

/**
 * Reads a policy file written by `uqcascade calibrate`. Its windows are
 * used as stored.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum UqcStatus uqc_policy_read(const char *path, struct UqcPolicy **out);

/**
 * # Safety
 * `policy` must be NULL or a handle not yet freed.
 */
void uqc_policy_free(struct UqcPolicy *policy);

/**
 * Runs the cascade over every sample of `table`.
 *
 * # Safety
 * `table` and `policy` must be live handles; `out` must be writable.
 */
enum UqcStatus uqc_cascade_run(const struct UqcTable *table,
                               const struct UqcPolicy *policy,
                               struct UqcTrace **out);

/**
 * # Safety
 * `trace` must be NULL or a handle not yet freed.
 */
void uqc_trace_free(struct UqcTrace *trace);

/**
 * Number of samples in the trace, or 0 for NULL.
 *
 * # Safety
 * `trace` must be NULL or a live handle.
 */
size_t uqc_trace_len(const struct UqcTrace *trace);

/**
 * Mean cost per sample, or NaN for NULL.
 *
 * # Safety
 * `trace` must be NULL or a live handle.
 */
double uqc_trace_avg_cost(const struct UqcTrace *trace);

/**
 * Copies per-sample exit stage (1-based), final uncertainty and final
 * prediction. Any output may be NULL.
 *
 * # Safety
 * `trace` must be a live handle; outputs must hold `len` elements.
 */
enum UqcStatus uqc_trace_copy(const struct UqcTrace *trace,
                              uint32_t *exit_stage,
                              double *uncertainty,
                              uint32_t *prediction,
                              size_t len);

/**
 * Probability that a random OOD sample is more uncertain than a random ID
 * sample, ties counting one half. Returned as a fraction.
 *
 * # Safety
 * `id` and `ood` must hold `n_id` and `n_ood` values; `out` writable.
 */
enum UqcStatus uqc_auroc(const double *id,
                         size_t n_id,
                         const double *ood,
                         size_t n_ood,
                         double *out);

/**
 * Area under the risk-coverage curve of samples with uncertainty `u` and
 * 0/1 error flags `wrong`. Returned as a fraction.
 *
 * # Safety
 * `u` and `wrong` must hold `n` values; `out` writable.
 */
enum UqcStatus uqc_aurc(const double *u, const uint8_t *wrong, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UQCASCADE_H */
