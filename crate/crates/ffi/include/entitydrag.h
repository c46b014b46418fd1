#ifndef ENTITYDRAG_H
#define ENTITYDRAG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EdStatus {
  ED_STATUS_OK = 0,
  // A required pointer was null.
  ED_STATUS_NULL_POINTER = 1,
  // Inputs are inconsistent (sizes, ids, empty masks).
  ED_STATUS_INVALID_ARGUMENT = 2,
  ED_STATUS_CONFIG = 3,
  // Checkpoint or scene files are missing.
  ED_STATUS_NOT_READY = 4,
  ED_STATUS_IO = 5,
  // Output buffer too small; the required size is reported.
  ED_STATUS_BUFFER_TOO_SMALL = 6,
  ED_STATUS_FAULT = 7,
  ED_STATUS_PANIC = 8,
} EdStatus;

// Loaded checkpoint.
typedef struct EdModel EdModel;

// Labeled clip used as a scene.
typedef struct EdScene EdScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call into this library on the same thread.
const char *ed_last_error(void);

// Library version as a static NUL-terminated string.
const char *ed_version(void);

// Largest inscribed circle of a row-major `height x width` mask (nonzero
// bytes are foreground). Center in pixel coordinates, `x` right, `y` down.
//
// # Safety
// `mask` must point to `height * width` bytes; outputs must be writable.
enum EdStatus ed_incircle(const uint8_t *mask,
                          size_t height,
                          size_t width,
                          double *out_x,
                          double *out_y,
                          double *out_radius);

// Mean distance between two `n`-point trajectories (`[x0, y0, x1, ...]`)
// over frames whose `valid` byte is nonzero; `valid` may be null.
//
// # Safety
// `pred` and `gt` must hold `2 * n` doubles, `valid` (if non-null) `n` bytes.
enum EdStatus ed_objmc(const double *pred,
                       const double *gt,
                       const uint8_t *valid,
                       size_t n,
                       double *out);

// Resamples a polyline of `n_points` points to `n_out` points evenly spaced
// by arc length, endpoints included.
//
// # Safety
// `points` must hold `2 * n_points` doubles and `out` room for `2 * n_out`.
enum EdStatus ed_resample_polyline(const double *points,
                                   size_t n_points,
                                   size_t n_out,
                                   double *out);

// Loads a checkpoint directory. `use_ema` selects EMA weights when present.
//
// # Safety
// `dir` must be a NUL-terminated string; `out` must be writable.
enum EdStatus ed_model_load(const char *dir, bool use_ema, struct EdModel **out);

// # Safety
// `model` must come from [`ed_model_load`] and not be used afterwards.
void ed_model_free(struct EdModel *model);

// Clip shape the model generates: frames, height, width.
//
// # Safety
// `model` must be a live handle; outputs must be writable.
enum EdStatus ed_model_shape(const struct EdModel *model,
                             size_t *out_frames,
                             size_t *out_height,
                             size_t *out_width);

// Loads a clip `.safetensors` file (with its `.json` spec alongside).
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum EdStatus ed_scene_load(const char *path, struct EdScene **out);

// # Safety
// `scene` must come from [`ed_scene_load`] and not be used afterwards.
void ed_scene_free(struct EdScene *scene);

// Ids of the entities visible in the first frame, ascending. Writes up
// to `cap` ids and always stores the total count in `out_count`.
//
// # Safety
// `scene` must be a live handle; `ids` must have room for `cap` values.
enum EdStatus ed_scene_entities(const struct EdScene *scene,
                                uint32_t *ids,
                                size_t cap,
                                size_t *out_count);

// Generates a clip. `trajectories_json` is a JSON array of
// `{"entity_id": u32, "points": [[x, y], ...]}`; drags with a point count
// other than the clip length are resampled by arc length and entities
// without a drag stay put. Writes `frames * height * width * 3` RGB bytes.
//
// # Safety
// Handles must be live, `trajectories_json` NUL-terminated and `out` must
// have room for `out_len` bytes.
enum EdStatus ed_generate(const struct EdModel *model,
                          const struct EdScene *scene,
                          const char *trajectories_json,
                          uint64_t seed,
                          size_t steps,
                          uint8_t *out,
                          size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENTITYDRAG_H */
