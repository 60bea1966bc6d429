#ifndef BREPLER_H
#define BREPLER_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BreplerStatus {
  BREPLER_STATUS_OK = 0,
  BREPLER_STATUS_NULL_ARGUMENT = 1,
  BREPLER_STATUS_INVALID_UTF8 = 2,
  BREPLER_STATUS_PARSE = 3,
  BREPLER_STATUS_INVALID_ARGUMENT = 4,
  BREPLER_STATUS_IO = 5,
  BREPLER_STATUS_EDIT = 6,
  BREPLER_STATUS_TRUNCATED = 7,
  BREPLER_STATUS_PANIC = 99,
} BreplerStatus;

/**
 * Opaque model handle.
 */
typedef struct BreplerModel BreplerModel;

/**
 * Opaque modifier-weights handle.
 */
typedef struct BreplerParams BreplerParams;

typedef struct BreplerValidity {
  bool manifold;
  bool closed;
  bool self_intersection_free;
  bool valid;
} BreplerValidity;

/**
 * Precision, recall and F1 per primitive type, faces then edges then vertices.
 */
typedef struct BreplerMatch {
  double precision[3];
  double recall[3];
  double f1[3];
  bool success;
} BreplerMatch;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or null. Valid until the next failing call.
 */
const char *brepler_last_error(void);

/**
 * Parses `.brj` text into a new model handle.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a writable pointer.
 */
enum BreplerStatus brepler_model_parse(const char *text, struct BreplerModel **out);

/**
 * Canonical `.brj` text; free it with [`brepler_string_free`].
 *
 * # Safety
 * `model` must come from this library and `out` must be writable.
 */
enum BreplerStatus brepler_model_serialize(const struct BreplerModel *model, char **out);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum BreplerStatus brepler_model_face_count(const struct BreplerModel *model, size_t *out);

/**
 * # Safety
 * `model` must come from this library (or be null) and not be used afterwards.
 */
void brepler_model_free(struct BreplerModel *model);

/**
 * # Safety
 * `s` must come from this library (or be null) and not be used afterwards.
 */
void brepler_string_free(char *s);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum BreplerStatus brepler_model_validity(const struct BreplerModel *model,
                                          struct BreplerValidity *out);

/**
 * Chamfer-threshold matching of `pred` against `gt`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum BreplerStatus brepler_match(const struct BreplerModel *pred,
                                 const struct BreplerModel *gt,
                                 double threshold,
                                 struct BreplerMatch *out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum BreplerStatus brepler_params_load(const char *path, struct BreplerParams **out);

/**
 * # Safety
 * `params` must come from this library (or be null) and not be used afterwards.
 */
void brepler_params_free(struct BreplerParams *params);

/**
 * Edits `model` as seen from `view_dir[3]` inside `bbox[4]`
 * (`x_min, y_min, x_max, y_max`, normalized) following `instruct`.
 * `report` may be null.
 *
 * # Safety
 * Arrays must hold 3 and 4 doubles; other pointers must be valid.
 */
enum BreplerStatus brepler_edit(const struct BreplerModel *model,
                                const struct BreplerParams *params,
                                const double *view_dir,
                                const double *bbox,
                                const char *instruct,
                                struct BreplerModel **out,
                                struct BreplerValidity *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BREPLER_H */
