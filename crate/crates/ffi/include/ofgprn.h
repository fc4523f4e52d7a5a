#ifndef OFGPRN_H
#define OFGPRN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum OfgStatus {
  OFG_STATUS_OK = 0,
  OFG_STATUS_NULL_ARGUMENT = 1,
  OFG_STATUS_INVALID_ARGUMENT = 2,
  OFG_STATUS_DATA_ERROR = 3,
  OFG_STATUS_NUMERICAL_ERROR = 4,
  OFG_STATUS_INTERNAL = 5,
} OfgStatus;

/**
 * A trained network with the settings it was trained with.
 */
typedef struct OfgDetector OfgDetector;

/**
 * A single-channel image with values in `[0, 1]`.
 */
typedef struct OfgImage OfgImage;

/**
 * Three aligned colour planes.
 */
typedef struct OfgRgb OfgRgb;

/**
 * One detection in pixel coordinates.
 */
typedef struct OfgBox {
  double x_min;
  double y_min;
  double x_max;
  double y_max;
  double score;
} OfgBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t ofg_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ofg_version(void);

/**
 * Copies `width * height` row-major values into a new, nonempty image.
 *
 * # Safety
 * `data` must point to `width * height` readable doubles; `out` must be a
 * valid pointer.
 */
enum OfgStatus ofg_image_new(size_t width,
                             size_t height,
                             const double *data,
                             struct OfgImage **out);

/**
 * # Safety
 * `img` must be null or a handle from this library, freed once.
 */
void ofg_image_free(struct OfgImage *img);

/**
 * Writes the image size.
 *
 * # Safety
 * All pointers must be valid.
 */
enum OfgStatus ofg_image_size(const struct OfgImage *img, size_t *width, size_t *height);

/**
 * Copies the pixels into `buf`, which must hold `len >= width * height`
 * doubles.
 *
 * # Safety
 * `buf` must point to `len` writable doubles.
 */
enum OfgStatus ofg_image_read(const struct OfgImage *img, double *buf, size_t len);

/**
 * Builds a colour frame from three planes (copied).
 *
 * # Safety
 * All pointers must be valid handles or out pointers.
 */
enum OfgStatus ofg_rgb_new(const struct OfgImage *r,
                           const struct OfgImage *g,
                           const struct OfgImage *b,
                           struct OfgRgb **out);

/**
 * # Safety
 * `rgb` must be null or a handle from this library, freed once.
 */
void ofg_rgb_free(struct OfgRgb *rgb);

/**
 * Fuses the luminance of `rgb` with `ir` using default settings.
 *
 * # Safety
 * All pointers must be valid.
 */
enum OfgStatus ofg_fuse(const struct OfgRgb *rgb, const struct OfgImage *ir, struct OfgImage **out);

/**
 * Estimates flow from `prev` to `next`, zeroes `next` outside the dilated
 * motion mask and reports how many pixels were kept.
 *
 * # Safety
 * All pointers must be valid; `moving` may be null.
 */
enum OfgStatus ofg_suppress_background(const struct OfgImage *prev,
                                       const struct OfgImage *next,
                                       double threshold,
                                       struct OfgImage **out,
                                       size_t *moving);

/**
 * Number of superpixels the named preset produces on `img`.
 *
 * # Safety
 * All pointers must be valid; `preset_name` NUL-terminated.
 */
enum OfgStatus ofg_segment_count(const struct OfgImage *img,
                                 const char *preset_name,
                                 size_t *count);

/**
 * Loads a checkpoint with the JSON training configuration written beside it.
 *
 * # Safety
 * Paths must be NUL-terminated; `out` must be valid.
 */
enum OfgStatus ofg_detector_load(const char *checkpoint_path,
                                 const char *config_path,
                                 struct OfgDetector **out);

/**
 * # Safety
 * `det` must be null or a handle from this library, freed once.
 */
void ofg_detector_free(struct OfgDetector *det);

/**
 * Runs the detector's preprocessing and network on one frame pair and its
 * predecessor, writing the best box.
 *
 * # Safety
 * All pointers must be valid handles; `out` must be valid.
 */
enum OfgStatus ofg_detect(const struct OfgDetector *det,
                          const struct OfgRgb *rgb,
                          const struct OfgImage *ir,
                          const struct OfgRgb *prev_rgb,
                          const struct OfgImage *prev_ir,
                          struct OfgBox *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OFGPRN_H */
