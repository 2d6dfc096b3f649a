#ifndef GAUSSCLUST_H
#define GAUSSCLUST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GcStatus {
  GC_STATUS_OK = 0,
  GC_STATUS_NULL_POINTER = 1,
  GC_STATUS_INVALID_ARGUMENT = 2,
  GC_STATUS_IO = 3,
  GC_STATUS_CHECKPOINT = 4,
  GC_STATUS_GROUND_TRUTH_REQUIRED = 5,
  GC_STATUS_RUNTIME = 6,
  GC_STATUS_PANIC = 7,
} GcStatus;

/**
 * Opaque in-memory image collection.
 */
typedef struct GcDataset GcDataset;

/**
 * Opaque clustering network.
 */
typedef struct GcModel GcModel;

/**
 * External clustering scores.
 */
typedef struct GcReport {
  double acc;
  double nmi;
  double ari;
} GcReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `len - 1` bytes. Returns the full
 * message length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t gc_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gc_version(void);

/**
 * Generates the synthetic shapes dataset.
 *
 * # Safety
 * `out` must be valid for a pointer write.
 */
enum GcStatus gc_dataset_synthetic(size_t k,
                                   size_t n_per_class,
                                   size_t image_size,
                                   uint64_t seed,
                                   struct GcDataset **out);

/**
 * Loads an image folder. With `has_ground_truth`, each subdirectory of
 * `root` is one class.
 *
 * # Safety
 * `root` must be a NUL-terminated string and `out` valid for a pointer write.
 */
enum GcStatus gc_dataset_load_folder(const char *root,
                                     size_t height,
                                     size_t width,
                                     bool grayscale,
                                     size_t k,
                                     bool has_ground_truth,
                                     struct GcDataset **out);

/**
 * Number of samples, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t gc_dataset_len(const struct GcDataset *ds);

/**
 * Copies the reference labels into `out` (`len` entries).
 *
 * # Safety
 * `ds` must be a live handle and `out` valid for `len` writes.
 */
enum GcStatus gc_dataset_labels(const struct GcDataset *ds, size_t *out, size_t len);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void gc_dataset_free(struct GcDataset *ds);

/**
 * Fresh small network sized for `ds`.
 *
 * # Safety
 * `ds` must be a live handle and `out` valid for a pointer write.
 */
enum GcStatus gc_model_new_small(const struct GcDataset *ds, uint64_t seed, struct GcModel **out);

/**
 * Network stored in a training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for a pointer write.
 */
enum GcStatus gc_model_load(const char *path, struct GcModel **out);

/**
 * Number of clusters, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t gc_model_cluster_count(const struct GcModel *model);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void gc_model_free(struct GcModel *model);

/**
 * Trains `model` in place. `config_toml` holds training settings in the
 * config-file syntax; null or empty keeps the defaults.
 *
 * # Safety
 * Handles must be live and `config_toml` null or NUL-terminated.
 */
enum GcStatus gc_train(struct GcModel *model, const struct GcDataset *ds, const char *config_toml);

/**
 * Cluster id of every sample, written to `out` (`len` must equal the
 * dataset size).
 *
 * # Safety
 * Handles must be live and `out` valid for `len` writes.
 */
enum GcStatus gc_predict(const struct GcModel *model,
                         const struct GcDataset *ds,
                         size_t *out,
                         size_t len);

/**
 * Scores `n` predicted ids against `n` reference labels.
 *
 * # Safety
 * `pred` and `truth` must be valid for `n` reads, `out` for one write.
 */
enum GcStatus gc_evaluate(const size_t *pred, const size_t *truth, size_t n, struct GcReport *out);

/**
 * Planar position of a `k`-entry label feature.
 *
 * # Safety
 * `l` must be valid for `k` reads; `x` and `y` for one write each.
 */
enum GcStatus gc_map_to_2d(const double *l, size_t k, double *x, double *y);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GAUSSCLUST_H */
