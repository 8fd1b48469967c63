#ifndef COVBIAS_H
#define COVBIAS_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum CovbiasImputation {
  COVBIAS_IMPUTATION_ZERO = 0,
  COVBIAS_IMPUTATION_MEDIAN = 1,
  COVBIAS_IMPUTATION_PIXEL_SAMPLE = 2,
  COVBIAS_IMPUTATION_NOISE_AUGMENTED = 3,
} CovbiasImputation;

typedef enum CovbiasMeasureKind {
  COVBIAS_MEASURE_KIND_VALUE = 0,
  COVBIAS_MEASURE_KIND_UNDEFINED = 1,
  COVBIAS_MEASURE_KIND_INFINITE = 2,
} CovbiasMeasureKind;

typedef enum CovbiasStatus {
  COVBIAS_STATUS_OK = 0,
  COVBIAS_STATUS_NULL_POINTER = 1,
  COVBIAS_STATUS_INVALID_ARGUMENT = 2,
  COVBIAS_STATUS_LENGTH_MISMATCH = 3,
  COVBIAS_STATUS_IO = 4,
  COVBIAS_STATUS_FORMAT = 5,
  COVBIAS_STATUS_MODEL = 6,
  COVBIAS_STATUS_METRICS = 7,
  COVBIAS_STATUS_PANIC = 8,
} CovbiasStatus;

/**
 * Opaque dataset handle.
 */
typedef struct CovbiasDataset CovbiasDataset;

/**
 * Opaque model handle.
 */
typedef struct CovbiasModel CovbiasModel;

typedef struct CovbiasConfusion {
  size_t tp;
  size_t fp;
  size_t tn;
  size_t fn_;
} CovbiasConfusion;

/**
 * A metric value; `value` is meaningful only for `Value`.
 */
typedef struct CovbiasMeasure {
  enum CovbiasMeasureKind kind;
  double value;
} CovbiasMeasure;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *covbias_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *covbias_version(void);

/**
 * Load a `.tds` dataset from its manifest path.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CovbiasStatus covbias_dataset_load(const char *path, struct CovbiasDataset **out);

/**
 * # Safety
 * `ds` must come from [`covbias_dataset_load`] and not be used afterwards.
 */
void covbias_dataset_free(struct CovbiasDataset *ds);

/**
 * Number of tiles, 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t covbias_dataset_len(const struct CovbiasDataset *ds);

/**
 * # Safety
 * `ds` must be a live handle; the out pointers must be valid.
 */
enum CovbiasStatus covbias_dataset_shape(const struct CovbiasDataset *ds,
                                         size_t *channels,
                                         size_t *height,
                                         size_t *width);

/**
 * Coverage of every tile; `len` must equal the dataset length.
 *
 * # Safety
 * `ds` must be a live handle and `out` point to `len` doubles.
 */
enum CovbiasStatus covbias_dataset_coverages(const struct CovbiasDataset *ds,
                                             double *out,
                                             size_t len);

/**
 * Labels as 1 (plume), 0 (none) or -1 (unlabeled).
 *
 * # Safety
 * `ds` must be a live handle and `out` point to `len` bytes.
 */
enum CovbiasStatus covbias_dataset_labels(const struct CovbiasDataset *ds, int8_t *out, size_t len);

/**
 * Load a checkpoint. The imputation recorded with it (zero when absent)
 * becomes the model's default.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CovbiasStatus covbias_model_load(const char *path, struct CovbiasModel **out);

/**
 * # Safety
 * `m` must come from [`covbias_model_load`] and not be used afterwards.
 */
void covbias_model_free(struct CovbiasModel *m);

/**
 * Number of parameters, 0 for a null handle.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
size_t covbias_model_param_count(const struct CovbiasModel *m);

/**
 * Impute every tile with the model's recorded strategy and score it.
 *
 * # Safety
 * Handles must be live and `out` point to `len` doubles.
 */
enum CovbiasStatus covbias_model_score(const struct CovbiasModel *m,
                                       const struct CovbiasDataset *ds,
                                       uint64_t seed,
                                       double *out,
                                       size_t len);

/**
 * [`covbias_model_score`] with an explicit imputation strategy.
 *
 * # Safety
 * Handles must be live and `out` point to `len` doubles.
 */
enum CovbiasStatus covbias_model_score_with(const struct CovbiasModel *m,
                                            const struct CovbiasDataset *ds,
                                            enum CovbiasImputation imputation,
                                            double noise_scale,
                                            uint64_t seed,
                                            double *out,
                                            size_t len);

/**
 * Scores at or above `threshold` count as flagged.
 *
 * # Safety
 * `scores` must point to `n` doubles.
 */
enum CovbiasStatus covbias_count_flags(const double *scores,
                                       size_t n,
                                       double threshold,
                                       size_t *out);

/**
 * Confusion counts for labels given as 0/1 bytes.
 *
 * # Safety
 * `scores` and `labels` must point to `n` elements.
 */
enum CovbiasStatus covbias_confusion(const double *scores,
                                     const uint8_t *labels,
                                     size_t n,
                                     double threshold,
                                     struct CovbiasConfusion *out);

/**
 * Balanced accuracy, precision and recall of a confusion matrix.
 *
 * # Safety
 * All pointers must be valid.
 */
enum CovbiasStatus covbias_classification_metrics(const struct CovbiasConfusion *c,
                                                  struct CovbiasMeasure *bacc,
                                                  struct CovbiasMeasure *precision,
                                                  struct CovbiasMeasure *recall);

/**
 * ΔFPR and ΔTPR (low-coverage minus high-coverage group).
 *
 * # Safety
 * Input arrays must hold `n` elements; out pointers must be valid.
 */
enum CovbiasStatus covbias_delta_rates(const double *scores,
                                       const uint8_t *labels,
                                       const double *coverages,
                                       size_t n,
                                       double threshold,
                                       double coverage_split,
                                       struct CovbiasMeasure *delta_fpr,
                                       struct CovbiasMeasure *delta_tpr);

/**
 * Ratio of the larger to the smaller group flag rate.
 *
 * # Safety
 * Input arrays must hold `n` elements; `out` must be valid.
 */
enum CovbiasStatus covbias_parity(const double *scores,
                                  const double *coverages,
                                  size_t n,
                                  double threshold,
                                  double coverage_split,
                                  struct CovbiasMeasure *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COVBIAS_H */
