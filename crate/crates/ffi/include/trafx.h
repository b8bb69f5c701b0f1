#ifndef TRAFX_H
#define TRAFX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Codes 2 to 5 match the CLI exit codes.
 */
typedef enum TrafxStatus {
  TRAFX_STATUS_OK = 0,
  TRAFX_STATUS_CONFIG_ERROR = 2,
  TRAFX_STATUS_DATA_ERROR = 3,
  TRAFX_STATUS_NUMERIC_ERROR = 4,
  TRAFX_STATUS_DEPENDENCY_ERROR = 5,
  TRAFX_STATUS_NULL_POINTER = 10,
  TRAFX_STATUS_INVALID_ARGUMENT = 11,
  TRAFX_STATUS_PANIC = 12,
} TrafxStatus;

typedef struct TrafxDataset TrafxDataset;

typedef struct TrafxModel TrafxModel;

/**
 * Test-set summary. Undefined metrics are NaN.
 */
typedef struct TrafxMetrics {
  size_t samples;
  double accuracy;
  double macro_precision;
  double macro_recall;
  double macro_f1;
  double kappa;
  double mcc;
  double balanced_accuracy;
  double hamming_loss;
  double auc_macro;
  double log_loss;
} TrafxMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread; empty after a
 * success. Valid until the next trafx call on the same thread.
 */
const char *trafx_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *trafx_version(void);

/**
 * Loads a `.trim` image container.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum TrafxStatus trafx_dataset_load(const char *path, struct TrafxDataset **out);

/**
 * Cleans a flow CSV and encodes it with the default schema, or with the
 * JSON schema at `schema_path` when it is non-null.
 *
 * # Safety
 * String arguments must be NUL-terminated or null where allowed; `out`
 * must be writable.
 */
enum TrafxStatus trafx_encode_csv(const char *csv_path,
                                  const char *schema_path,
                                  struct TrafxDataset **out);

/**
 * Number of images; 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t trafx_dataset_len(const struct TrafxDataset *ds);

/**
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t trafx_dataset_num_classes(const struct TrafxDataset *ds);

/**
 * Label of image `index`.
 *
 * # Safety
 * `ds` must be a live handle; `label` must be writable.
 */
enum TrafxStatus trafx_dataset_label(const struct TrafxDataset *ds, size_t index, size_t *label);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void trafx_dataset_free(struct TrafxDataset *ds);

/**
 * Loads a model checkpoint.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum TrafxStatus trafx_model_load(const char *path, struct TrafxModel **out);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t trafx_model_num_classes(const struct TrafxModel *model);

/**
 * Writes the class probabilities of image `index` into `probs`, which must
 * hold `len` doubles with `len` equal to the model's class count.
 *
 * # Safety
 * Handles must be live; `probs` must point to `len` writable doubles.
 */
enum TrafxStatus trafx_model_predict(const struct TrafxModel *model,
                                     const struct TrafxDataset *ds,
                                     size_t index,
                                     double *probs,
                                     size_t len);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void trafx_model_free(struct TrafxModel *model);

/**
 * Metrics for `n` predictions over `k` classes. `probs` is row-major
 * `n * k`, each row a probability vector; `labels` holds `n` true labels.
 *
 * # Safety
 * `probs` must point to `n * k` doubles, `labels` to `n` values and `out`
 * must be writable.
 */
enum TrafxStatus trafx_metrics_from_probabilities(const double *probs,
                                                  const size_t *labels,
                                                  size_t n,
                                                  size_t k,
                                                  struct TrafxMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRAFX_H */
