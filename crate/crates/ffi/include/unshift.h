#ifndef UNSHIFT_H
#define UNSHIFT_H

/* Generated by cbindgen from unshift-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum UnshiftStatus {
  UNSHIFT_STATUS_OK = 0,
  /**
   * A pointer, shape or value argument was unusable.
   */
  UNSHIFT_STATUS_INVALID_ARGUMENT = 1,
  /**
   * The filesystem said no.
   */
  UNSHIFT_STATUS_IO = 2,
  /**
   * A checkpoint was missing, corrupt or mismatched.
   */
  UNSHIFT_STATUS_CHECKPOINT = 3,
  /**
   * A dataset directory was missing, corrupt or mismatched.
   */
  UNSHIFT_STATUS_DATASET = 4,
  /**
   * A bug on this side of the boundary (includes caught panics).
   */
  UNSHIFT_STATUS_INTERNAL = 5,
} UnshiftStatus;

/**
 * Frozen classifier plus its checkpoint metadata.
 */
typedef struct UnshiftClassifier UnshiftClassifier;

/**
 * Labeled image set read from a shifted-dataset directory.
 */
typedef struct UnshiftDataset UnshiftDataset;

/**
 * Trained transformation network.
 */
typedef struct UnshiftTransformNet UnshiftTransformNet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *unshift_version(void);

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread. Empty string if
 * nothing failed yet.
 */
const char *unshift_last_error_message(void);

/**
 * Loads a classifier checkpoint directory into `*out`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum UnshiftStatus unshift_classifier_load(const char *dir, struct UnshiftClassifier **out);

/**
 * Releases a classifier handle. NULL is a no-op.
 *
 * # Safety
 * `h` must come from [`unshift_classifier_load`] and not be freed twice.
 */
void unshift_classifier_free(struct UnshiftClassifier *h);

/**
 * Number of classes the classifier separates.
 *
 * # Safety
 * `h` must be a live classifier handle.
 */
size_t unshift_classifier_num_classes(const struct UnshiftClassifier *h);

/**
 * Loads a transformation-net checkpoint directory into `*out`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum UnshiftStatus unshift_tnet_load(const char *dir, struct UnshiftTransformNet **out);

/**
 * Releases a transformation-net handle. NULL is a no-op.
 *
 * # Safety
 * `h` must come from [`unshift_tnet_load`] and not be freed twice.
 */
void unshift_tnet_free(struct UnshiftTransformNet *h);

/**
 * Opens a shifted-dataset directory (as written by `unshift make-shift`).
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum UnshiftStatus unshift_dataset_open(const char *dir, struct UnshiftDataset **out);

/**
 * Releases a dataset handle. NULL is a no-op.
 *
 * # Safety
 * `h` must come from [`unshift_dataset_open`] and not be freed twice.
 */
void unshift_dataset_free(struct UnshiftDataset *h);

/**
 * Number of images in the dataset; 0 for NULL.
 *
 * # Safety
 * `h` must be a live dataset handle or NULL.
 */
size_t unshift_dataset_len(const struct UnshiftDataset *h);

/**
 * Writes the dataset's image shape into `*channels`, `*height`, `*width`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum UnshiftStatus unshift_dataset_shape(const struct UnshiftDataset *h,
                                         size_t *channels,
                                         size_t *height,
                                         size_t *width);

/**
 * Writes the class label of image `index` into `*out`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum UnshiftStatus unshift_dataset_label(const struct UnshiftDataset *h, size_t index, size_t *out);

/**
 * Copies image `index` into `pixels` (CHW floats; `len` must equal
 * channels*height*width).
 *
 * # Safety
 * `pixels` must point to at least `len` writable floats.
 */
enum UnshiftStatus unshift_dataset_copy_image(const struct UnshiftDataset *h,
                                              size_t index,
                                              float *pixels,
                                              size_t len);

/**
 * Classifies one raw image; the winning class index lands in `*out_class`.
 *
 * # Safety
 * `pixels` must point to channels*height*width readable floats.
 */
enum UnshiftStatus unshift_classify(struct UnshiftClassifier *model,
                                    const float *pixels,
                                    size_t channels,
                                    size_t height,
                                    size_t width,
                                    size_t *out_class);

/**
 * Predicts backward-transform parameters for one raw image. `out_params`
 * receives (rotation degrees, brightness, contrast).
 *
 * # Safety
 * `pixels` must point to channels*height*width readable floats and
 * `out_params` to 3 writable doubles.
 */
enum UnshiftStatus unshift_predict_params(struct UnshiftTransformNet *net,
                                          const float *pixels,
                                          size_t channels,
                                          size_t height,
                                          size_t width,
                                          double *out_params);

/**
 * Classifies one raw image after the learned backward transform. The class
 * lands in `*out_class`; when non-NULL, `out_params` receives the applied
 * (rotation degrees, brightness, contrast).
 *
 * # Safety
 * `pixels` must point to channels*height*width readable floats;
 * `out_params`, when non-NULL, to 3 writable doubles.
 */
enum UnshiftStatus unshift_adapt_classify(struct UnshiftClassifier *model,
                                          struct UnshiftTransformNet *net,
                                          const float *pixels,
                                          size_t channels,
                                          size_t height,
                                          size_t width,
                                          size_t *out_class,
                                          double *out_params);

/**
 * Accuracy of `model` on the dataset, through the backward transform when
 * `net` is non-NULL. Lands in `*out_accuracy`.
 *
 * # Safety
 * `model` and `ds` must be live handles; `net` may be NULL.
 */
enum UnshiftStatus unshift_dataset_accuracy(struct UnshiftClassifier *model,
                                            struct UnshiftTransformNet *net,
                                            const struct UnshiftDataset *ds,
                                            double *out_accuracy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNSHIFT_H */
