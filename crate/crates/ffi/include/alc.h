#ifndef ALC_H
#define ALC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes; the values match the `alc` command's exit codes.
 */
typedef enum AlcStatus {
  ALC_STATUS_OK = 0,
  /**
   * Invalid configuration, argument or null pointer.
   */
  ALC_STATUS_CONFIG_ERROR = 2,
  /**
   * File, image, dataset or checkpoint failure.
   */
  ALC_STATUS_IO_ERROR = 3,
  /**
   * Numerical failure or internal panic.
   */
  ALC_STATUS_RUNTIME_ERROR = 4,
} AlcStatus;

/**
 * Opaque detector handle.
 */
typedef struct AlcDetector AlcDetector;

/**
 * Corner-form box in pixels.
 */
typedef struct AlcBox {
  double x1;
  double y1;
  double x2;
  double y2;
} AlcBox;

typedef struct AlcDetection {
  struct AlcBox bbox;
  double confidence;
  uint32_t class_id;
} AlcDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *alc_last_error_message(void);

/**
 * Builds a freshly initialized detector from a model-configuration JSON
 * object; `"{}"` gives the defaults.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AlcStatus alc_detector_new(const char *config_json, struct AlcDetector **out);

/**
 * Loads a detector from a checkpoint file written by `alc train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AlcStatus alc_detector_load(const char *path, struct AlcDetector **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `det` must come from this library and not be used afterwards.
 */
void alc_detector_free(struct AlcDetector *det);

/**
 * Trainable parameter count, or 0 for a null handle.
 *
 * # Safety
 * `det` must be null or a live handle.
 */
size_t alc_detector_num_parameters(const struct AlcDetector *det);

/**
 * Square model input size in pixels, or 0 for a null handle.
 *
 * # Safety
 * `det` must be null or a live handle.
 */
size_t alc_detector_input_size(const struct AlcDetector *det);

/**
 * Detects objects in a packed 8-bit RGB image of `width × height` pixels.
 * Boxes are in the image's own pixel coordinates, ordered by confidence.
 * Writes at most `capacity` detections to `out` and the total number found
 * to `out_count`, so a caller can retry with a larger buffer.
 *
 * # Safety
 * `rgb` must hold `3 · width · height` bytes, `out` must hold `capacity`
 * entries (it may be null when `capacity` is 0), and `out_count` must be
 * valid.
 */
enum AlcStatus alc_detector_detect(const struct AlcDetector *det,
                                   const uint8_t *rgb,
                                   uint32_t width,
                                   uint32_t height,
                                   double conf_threshold,
                                   double nms_threshold,
                                   struct AlcDetection *out,
                                   size_t capacity,
                                   size_t *out_count);

/**
 * Intersection over union of two boxes; 0 when the union is empty.
 */
double alc_iou(struct AlcBox a, struct AlcBox b);

/**
 * Adaptive-threshold focal loss of one probability `p` against `target`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum AlcStatus alc_atf_loss(double p, double target, double gamma, double tau, double *out);

/**
 * Number of behaviour classes.
 */
size_t alc_num_classes(void);

/**
 * Static name of class `id`, or null when out of range.
 */
const char *alc_class_name(size_t id);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ALC_H */
