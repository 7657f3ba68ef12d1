#ifndef UNITLENS_H
#define UNITLENS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define UL_LAYER_CONV1 0

#define UL_LAYER_CONV2 1

#define UL_LAYER_CONV3 2

#define UL_LAYER_FC1 3

#define UL_LAYER_FC2 4

#define UL_LAYER_OUT 5

/**
 * Pixels per image expected by the model calls.
 */
#define UL_PIXELS 784

/**
 * Result of every fallible call.
 */
typedef enum UlStatus {
  UL_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  UL_STATUS_NULL_POINTER = 1,
  /**
   * Bad argument value: unknown layer, unit out of range, bad `k`.
   */
  UL_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Unreadable or malformed file.
   */
  UL_STATUS_DATA = 3,
  /**
   * Non-finite values or an undefined statistic.
   */
  UL_STATUS_NUMERIC = 4,
  /**
   * Array lengths disagree or an output buffer is too small.
   */
  UL_STATUS_SHAPE = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  UL_STATUS_PANIC = 6,
} UlStatus;

/**
 * A recorded activation matrix: one row per image, one column per unit
 * (a convolutional unit spans its whole pooled plane).
 */
typedef struct UlActivations UlActivations;

/**
 * A trained or freshly initialized network.
 */
typedef struct UlModel UlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static nul-terminated string.
 */
const char *ul_version(void);

/**
 * Message of the last failed call on this thread, or null after a
 * successful one. Valid until the next call into the library.
 */
const char *ul_last_error(void);

/**
 * Fresh network with uniform `±1/sqrt(fan_in)` weights drawn from `seed`.
 *
 * # Safety
 * `out` must be valid for one pointer write.
 */
enum UlStatus ul_model_new(uint64_t seed, struct UlModel **out);

/**
 * Load a checkpoint written by the toolkit.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` valid for one write.
 */
enum UlStatus ul_model_load(const char *path, struct UlModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a nul-terminated string.
 */
enum UlStatus ul_model_save(const struct UlModel *model, const char *path);

/**
 * Independent copy of a model.
 *
 * # Safety
 * `model` must be a live handle and `out` valid for one write.
 */
enum UlStatus ul_model_clone(const struct UlModel *model, struct UlModel **out);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle not used afterwards.
 */
void ul_model_free(struct UlModel *model);

/**
 * Number of units (channels or neurons) in `layer`.
 *
 * # Safety
 * `model` must be a live handle and `out` valid for one write.
 */
enum UlStatus ul_model_units(const struct UlModel *model, uint32_t layer, size_t *out);

/**
 * Values per image that `ul_model_forward_layer` writes for `layer`.
 *
 * # Safety
 * `model` must be a live handle and `out` valid for one write.
 */
enum UlStatus ul_model_activation_width(const struct UlModel *model, uint32_t layer, size_t *out);

/**
 * Zero the incoming weights and bias of `units` in `layer`, in place.
 *
 * # Safety
 * `model` must be a live handle and `units` hold `n_units` values.
 */
enum UlStatus ul_model_ablate(struct UlModel *model,
                              uint32_t layer,
                              const size_t *units,
                              size_t n_units);

/**
 * Predicted class of `n_images` normalized 28x28 images.
 *
 * # Safety
 * `images` must hold `n_images * UL_PIXELS` floats and `out_labels`
 * `n_images` bytes.
 */
enum UlStatus ul_model_predict(const struct UlModel *model,
                               const float *images,
                               size_t n_images,
                               uint8_t *out_labels);

/**
 * Post-activation values of `layer` for `n_images` images, `(n_images,
 * width)` with width from `ul_model_activation_width`.
 *
 * # Safety
 * `images` must hold `n_images * UL_PIXELS` floats and `out` `out_len`.
 */
enum UlStatus ul_model_forward_layer(const struct UlModel *model,
                                     const float *images,
                                     size_t n_images,
                                     uint32_t layer,
                                     float *out,
                                     size_t out_len);

/**
 * Load an activation matrix saved by the capture stage.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` valid for one write.
 */
enum UlStatus ul_activations_load(const char *path, struct UlActivations **out);

/**
 * Release an activation matrix. Null is ignored.
 *
 * # Safety
 * `acts` must be null or a live handle not used afterwards.
 */
void ul_activations_free(struct UlActivations *acts);

/**
 * Rows (images) and unit columns of a matrix.
 *
 * # Safety
 * `acts` must be a live handle; the outputs valid for one write each.
 */
enum UlStatus ul_activations_shape(const struct UlActivations *acts, size_t *rows, size_t *cols);

/**
 * Activational selectivity and preferred class of every column.
 *
 * # Safety
 * `acts` must be a live handle; both outputs must hold `len` values.
 */
enum UlStatus ul_activations_selectivity(const struct UlActivations *acts,
                                         double *out_selectivity,
                                         uint8_t *out_class,
                                         size_t len);

/**
 * Activational selectivity of a raw `(rows, cols)` matrix with one label
 * per row.
 *
 * # Safety
 * `values` must hold `rows * cols` floats, `labels` `rows` bytes and both
 * outputs `cols` values.
 */
enum UlStatus ul_selectivity(const float *values,
                             size_t rows,
                             size_t cols,
                             const uint8_t *labels,
                             double *out_selectivity,
                             uint8_t *out_class);

/**
 * Neighborhood hit of `n` labelled 2-D points (`coords` is `x0, y0, x1,
 * ...`): the fraction of each point's `k` nearest neighbors sharing its
 * label, or with `strict` the fraction of points whose neighbors all do.
 *
 * # Safety
 * `coords` must hold `2 * n` doubles, `labels` `n` bytes.
 */
enum UlStatus ul_neighborhood_hit(const double *coords,
                                  size_t n,
                                  const uint8_t *labels,
                                  size_t k,
                                  bool strict,
                                  double *out);

/**
 * # Safety
 * `x` and `y` must hold `n` doubles; outputs valid for one write each.
 */
enum UlStatus ul_spearman(const double *x, const double *y, size_t n, double *out_r, double *out_p);

/**
 * # Safety
 * `x` and `y` must hold `n` doubles; outputs valid for one write each.
 */
enum UlStatus ul_pearson(const double *x, const double *y, size_t n, double *out_r, double *out_p);

/**
 * Two-sided p-value of a correlation `r` over `n` pairs (t-test with
 * `n - 2` degrees of freedom).
 *
 * # Safety
 * `out` must be valid for one write.
 */
enum UlStatus ul_correlation_p_value(double r, size_t n, double *out);

/**
 * Procrustes disparity of `n` 2-D points after removing translation,
 * scale, rotation and reflection. With `out_aligned` non-null the
 * standardized, aligned target (`2 * n` doubles) is written there.
 *
 * # Safety
 * `reference` and `target` must hold `2 * n` doubles; `out_aligned`, if
 * non-null, `2 * n`.
 */
enum UlStatus ul_procrustes(const double *reference,
                            const double *target,
                            size_t n,
                            double *out_disparity,
                            double *out_aligned);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNITLENS_H */
