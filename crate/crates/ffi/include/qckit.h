#ifndef QCKIT_H
#define QCKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QcStatus {
  QC_STATUS_OK = 0,
  QC_STATUS_NULL_POINTER = 1,
  QC_STATUS_INVALID_ARGUMENT = 2,
  QC_STATUS_IO = 3,
  QC_STATUS_FORMAT = 4,
  QC_STATUS_CONFIG = 5,
  QC_STATUS_SHAPE = 6,
  QC_STATUS_UNSUPPORTED_MESH = 7,
  QC_STATUS_TRAINING = 8,
  QC_STATUS_INTERNAL = 9,
  QC_STATUS_PANIC = 10,
} QcStatus;

/**
 * Opaque support map between two meshes.
 */
typedef struct QcMap QcMap;

/**
 * Opaque point cloud.
 */
typedef struct QcMesh QcMesh;

/**
 * Opaque trained autoencoder.
 */
typedef struct QcModel QcModel;

/**
 * Opaque time series of fields.
 */
typedef struct QcSeries QcSeries;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or null. The pointer
 * stays valid until the next qckit call on this thread.
 */
const char *qc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *qc_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum QcStatus qc_mesh_load(const char *path, struct QcMesh **out);

/**
 * Uniform grid with `n_per_dim` points per axis on `[0, extent]^dim`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum QcStatus qc_mesh_uniform_grid(size_t dim,
                                   size_t n_per_dim,
                                   double extent,
                                   struct QcMesh **out);

/**
 * Number of points, or 0 for a null handle.
 *
 * # Safety
 * `mesh` must be null or a live handle.
 */
size_t qc_mesh_len(const struct QcMesh *mesh);

/**
 * Spatial dimension, or 0 for a null handle.
 *
 * # Safety
 * `mesh` must be null or a live handle.
 */
size_t qc_mesh_dim(const struct QcMesh *mesh);

/**
 * # Safety
 * `mesh` must be null or a handle not yet freed.
 */
void qc_mesh_free(struct QcMesh *mesh);

/**
 * Support map of all input points within `alpha` of each output point.
 *
 * # Safety
 * Handles must be live and `out` a valid pointer.
 */
enum QcStatus qc_map_build(const struct QcMesh *input,
                           const struct QcMesh *output,
                           double alpha,
                           struct QcMap **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum QcStatus qc_map_load(const char *path, struct QcMap **out);

/**
 * # Safety
 * `map` must be a live handle and `path` a NUL-terminated string.
 */
enum QcStatus qc_map_save(const struct QcMap *map, const char *path);

/**
 * Total number of (output, input) pairs, or 0 for a null handle.
 *
 * # Safety
 * `map` must be null or a live handle.
 */
size_t qc_map_nnz(const struct QcMap *map);

/**
 * # Safety
 * `map` must be null or a handle not yet freed.
 */
void qc_map_free(struct QcMap *map);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum QcStatus qc_series_load(const char *path, struct QcSeries **out);

/**
 * Number of time samples, or 0 for a null handle.
 *
 * # Safety
 * `series` must be null or a live handle.
 */
size_t qc_series_samples(const struct QcSeries *series);

/**
 * Values per sample (channels times points), or 0 for a null handle.
 *
 * # Safety
 * `series` must be null or a live handle.
 */
size_t qc_series_sample_len(const struct QcSeries *series);

/**
 * Copies sample `t` into `out`, which must hold exactly
 * `qc_series_sample_len` values.
 *
 * # Safety
 * `series` must be a live handle and `out` valid for `len` writes.
 */
enum QcStatus qc_series_sample(const struct QcSeries *series, size_t t, double *out, size_t len);

/**
 * # Safety
 * `series` must be null or a handle not yet freed.
 */
void qc_series_free(struct QcSeries *series);

/**
 * Loads a trained model from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum QcStatus qc_model_load(const char *path, struct QcModel **out);

/**
 * Latent dimension, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t qc_model_latent_dim(const struct QcModel *model);

/**
 * Values per input sample (channels times mesh points), or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t qc_model_sample_len(const struct QcModel *model);

/**
 * Encodes one sample of `sample_len` values into `code_len` latent values.
 *
 * # Safety
 * `model` must be a live handle; `sample` valid for `sample_len` reads and
 * `code` for `code_len` writes.
 */
enum QcStatus qc_model_encode(const struct QcModel *model,
                              const double *sample,
                              size_t sample_len,
                              double *code,
                              size_t code_len);

/**
 * Decodes `code_len` latent values into a sample of `sample_len` values.
 *
 * # Safety
 * `model` must be a live handle; `code` valid for `code_len` reads and
 * `sample` for `sample_len` writes.
 */
enum QcStatus qc_model_decode(const struct QcModel *model,
                              const double *code,
                              size_t code_len,
                              double *sample,
                              size_t sample_len);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void qc_model_free(struct QcModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QCKIT_H */
