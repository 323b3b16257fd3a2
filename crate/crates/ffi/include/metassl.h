#ifndef METASSL_H
#define METASSL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MetasslStatus {
  METASSL_STATUS_OK = 0,
  METASSL_STATUS_NULL_POINTER = 1,
  METASSL_STATUS_INVALID_ARGUMENT = 2,
  METASSL_STATUS_IO = 3,
  METASSL_STATUS_PARSE = 4,
  METASSL_STATUS_CONFIG = 5,
  METASSL_STATUS_NUMERICAL = 6,
  /**
   * A check ran to completion and failed.
   */
  METASSL_STATUS_VERIFY_FAILED = 7,
  METASSL_STATUS_INTERNAL = 99,
} MetasslStatus;

/**
 * Which part of a dataset an accuracy query refers to.
 */
typedef enum MetasslSplit {
  METASSL_SPLIT_LABELED = 0,
  METASSL_SPLIT_UNLABELED = 1,
  METASSL_SPLIT_TEST = 2,
} MetasslSplit;

/**
 * A dataset with its labeled / unlabeled / test assignment.
 */
typedef struct MetasslDataset MetasslDataset;

/**
 * A classifier together with the standardization it expects.
 */
typedef struct MetasslModel MetasslModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *metassl_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *metassl_version(void);

/**
 * Loads a CSV with header `f0,...,label[,split]`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out_ds` writable.
 */
enum MetasslStatus metassl_dataset_load_csv(const char *path, struct MetasslDataset **out_ds);

/**
 * # Safety
 * `ds` must be a live handle and `path` a NUL-terminated string.
 */
enum MetasslStatus metassl_dataset_save_csv(const struct MetasslDataset *ds, const char *path);

/**
 * Two interleaving half circles, `n` points, Gaussian noise `noise`.
 *
 * # Safety
 * `out_ds` must be a writable pointer.
 */
enum MetasslStatus metassl_dataset_two_moons(size_t n,
                                             double noise,
                                             uint64_t seed,
                                             struct MetasslDataset **out_ds);

/**
 * `k` isotropic Gaussian blobs.
 *
 * # Safety
 * `out_ds` must be a writable pointer.
 */
enum MetasslStatus metassl_dataset_blobs(size_t n,
                                         size_t k,
                                         double spread,
                                         double sigma,
                                         uint64_t seed,
                                         struct MetasslDataset **out_ds);

/**
 * Moves `n_test` examples into the test split, stratified by class.
 *
 * # Safety
 * `ds` must be a live handle.
 */
enum MetasslStatus metassl_dataset_hold_out_test(struct MetasslDataset *ds,
                                                 size_t n_test,
                                                 uint64_t seed);

/**
 * Reveals `n_labeled` class-balanced labels; the other training rows become
 * unlabeled. `include_labeled` also places labeled rows in the unlabeled pool.
 *
 * # Safety
 * `ds` must be a live handle.
 */
enum MetasslStatus metassl_dataset_split_labels(struct MetasslDataset *ds,
                                                size_t n_labeled,
                                                uint64_t seed,
                                                bool include_labeled);

/**
 * Standardizes features with statistics of the non-test rows.
 *
 * # Safety
 * `ds` must be a live handle.
 */
enum MetasslStatus metassl_dataset_standardize(struct MetasslDataset *ds);

/**
 * Writes the row count, feature count and class count. Any of the output
 * pointers may be null.
 *
 * # Safety
 * `ds` must be a live handle; non-null outputs must be writable.
 */
enum MetasslStatus metassl_dataset_shape(const struct MetasslDataset *ds,
                                         size_t *rows,
                                         size_t *dim,
                                         size_t *classes);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void metassl_dataset_free(struct MetasslDataset *ds);

/**
 * Trains on `ds` with a `key = value` config, one setting per line or
 * separated by `;`. Null or empty `config` keeps the defaults.
 *
 * If training diverges the last finite model is still returned through
 * `out_model` and the status is `METASSL_STATUS_NUMERICAL`.
 *
 * # Safety
 * `ds` must be a live handle, `config` null or NUL-terminated, `out_model`
 * writable.
 */
enum MetasslStatus metassl_train(const struct MetasslDataset *ds,
                                 const char *config,
                                 struct MetasslModel **out_model);

/**
 * # Safety
 * `path` must be NUL-terminated and `out_model` writable.
 */
enum MetasslStatus metassl_model_load(const char *path, struct MetasslModel **out_model);

/**
 * # Safety
 * `model` must be a live handle and `path` NUL-terminated.
 */
enum MetasslStatus metassl_model_save(const struct MetasslModel *model, const char *path);

/**
 * Input dimension, class count and total parameter count. Any output may be
 * null.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must be writable.
 */
enum MetasslStatus metassl_model_shape(const struct MetasslModel *model,
                                       size_t *input_dim,
                                       size_t *classes,
                                       size_t *params);

/**
 * Predicted class for each of `rows` row-major inputs of the model's input
 * dimension. Raw features are standardized first if the model carries a
 * standardizer.
 *
 * # Safety
 * `x` must hold `rows * input_dim` doubles and `out_classes` room for `rows`
 * values.
 */
enum MetasslStatus metassl_model_predict(const struct MetasslModel *model,
                                         const double *x,
                                         size_t rows,
                                         size_t *out_classes);

/**
 * Top-1 accuracy on one split of `ds`. Fails with `METASSL_STATUS_INVALID_ARGUMENT`
 * when no example of that split has a known class.
 *
 * # Safety
 * `model` and `ds` must be live handles and `out_accuracy` writable.
 */
enum MetasslStatus metassl_model_accuracy(const struct MetasslModel *model,
                                          const struct MetasslDataset *ds,
                                          enum MetasslSplit split,
                                          double *out_accuracy);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void metassl_model_free(struct MetasslModel *model);

/**
 * Runs verification suites, comma separated or `all`. `steps` of 0 keeps
 * each suite's default horizon. Returns `METASSL_STATUS_VERIFY_FAILED` if any
 * suite fails. When `out_report` is non-null it receives the `key = value`
 * report, to be released with [`metassl_string_free`].
 *
 * # Safety
 * `suites` must be NUL-terminated; `out_report` null or writable.
 */
enum MetasslStatus metassl_verify(const char *suites,
                                  uint64_t seed,
                                  size_t steps,
                                  char **out_report);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void metassl_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METASSL_H */
