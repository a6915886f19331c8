#ifndef GAZEKIT_H
#define GAZEKIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GkStatus {
  GK_STATUS_OK = 0,
  GK_STATUS_NULL_POINTER = 1,
  GK_STATUS_INVALID_UTF8 = 2,
  GK_STATUS_INVALID_INPUT = 3,
  GK_STATUS_FORMAT = 4,
  GK_STATUS_IO = 5,
  GK_STATUS_MALFORMED_RESPONSE = 6,
  GK_STATUS_UNDEFINED_METRIC = 7,
  GK_STATUS_CONFIG = 8,
  GK_STATUS_OUT_OF_RANGE = 9,
  GK_STATUS_PANIC = 10,
} GkStatus;

/**
 * Encoded HHA image.
 */
typedef struct GkHha GkHha;

/**
 * Parsed model response.
 */
typedef struct GkPrediction GkPrediction;

/**
 * Box in normalized bins, each coordinate in `[0, 999]`.
 */
typedef struct GkNormBox {
  uint32_t x1;
  uint32_t y1;
  uint32_t x2;
  uint32_t y2;
} GkNormBox;

/**
 * Box in pixels.
 */
typedef struct GkPixelBox {
  double x1;
  double y1;
  double x2;
  double y2;
} GkPixelBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until
 * the next gazekit call on the same thread.
 */
const char *gk_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gk_version(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void gk_string_free(char *s);

/**
 * Encode a row-major depth map with the default settings.
 *
 * # Safety
 * `depth` must point to `width * height` doubles; `out` must be writable.
 */
enum GkStatus gk_hha_encode(const double *depth,
                            uint32_t width,
                            uint32_t height,
                            struct GkHha **out);

/**
 * # Safety
 * `hha` must be a live handle or NULL.
 */
uint32_t gk_hha_width(const struct GkHha *hha);

/**
 * # Safety
 * `hha` must be a live handle or NULL.
 */
uint32_t gk_hha_height(const struct GkHha *hha);

/**
 * Copy interleaved RGB bytes (disparity, height, angle) into `buf`, which
 * must hold `3 * width * height` bytes.
 *
 * # Safety
 * `buf` must point to `len` writable bytes.
 */
enum GkStatus gk_hha_rgb(const struct GkHha *hha, uint8_t *buf, size_t len);

/**
 * # Safety
 * `hha` must come from [`gk_hha_encode`] and not have been freed.
 */
void gk_hha_free(struct GkHha *hha);

/**
 * Render a box with the default tokens.
 *
 * # Safety
 * `out` must be writable; free the result with [`gk_string_free`].
 */
enum GkStatus gk_serialize_box(struct GkNormBox b, char **out);

/**
 * Parse a model response. On `MalformedResponse`, `error_offset` (if not
 * NULL) receives the byte offset of the problem.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum GkStatus gk_parse_response(const char *text, struct GkPrediction **out, size_t *error_offset);

/**
 * # Safety
 * `pred` must be a live handle or NULL.
 */
size_t gk_prediction_box_count(const struct GkPrediction *pred);

/**
 * # Safety
 * `pred` must be a live handle; `out` must be writable.
 */
enum GkStatus gk_prediction_box(const struct GkPrediction *pred,
                                size_t index,
                                struct GkNormBox *out);

/**
 * # Safety
 * `pred` must be a live handle or NULL.
 */
bool gk_prediction_out_of_frame(const struct GkPrediction *pred);

/**
 * Object class as a new string, or NULL when the response names none.
 *
 * # Safety
 * `pred` must be a live handle or NULL.
 */
char *gk_prediction_class(const struct GkPrediction *pred);

/**
 * The prediction as one JSON line.
 *
 * # Safety
 * `pred` must be a live handle; `out` must be writable.
 */
enum GkStatus gk_prediction_to_json(const struct GkPrediction *pred, char **out);

/**
 * # Safety
 * `pred` must come from [`gk_parse_response`] and not have been freed.
 */
void gk_prediction_free(struct GkPrediction *pred);

/**
 * Intersection over union of two pixel boxes; negative on invalid boxes.
 */
double gk_iou(struct GkPixelBox a, struct GkPixelBox b);

/**
 * AUC of a `grid x grid` row-major heatmap against `n_points` normalized
 * points given as `x0, y0, x1, y1, ...`.
 *
 * # Safety
 * `heatmap` must hold `grid * grid` doubles, `points_xy` `2 * n_points`.
 */
enum GkStatus gk_auc(const double *heatmap,
                     uint32_t grid,
                     const double *points_xy,
                     size_t n_points,
                     double *out);

/**
 * Evaluate a predictions JSONL file against an annotations JSONL file
 * with default settings; `out` receives the report as JSON.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be writable.
 */
enum GkStatus gk_evaluate_files(const char *predictions, const char *annotations, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GAZEKIT_H */
