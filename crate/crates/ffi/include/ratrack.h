#ifndef RATRACK_H
#define RATRACK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RatrackStatus {
  RATRACK_STATUS_OK = 0,
  RATRACK_STATUS_INVALID_ARGUMENT = 1,
  RATRACK_STATUS_DIMENSION_MISMATCH = 2,
  RATRACK_STATUS_IO = 3,
  RATRACK_STATUS_PARSE = 4,
  RATRACK_STATUS_MODEL = 5,
  RATRACK_STATUS_INTERNAL = 6,
  RATRACK_STATUS_NULL_POINTER = 7,
  RATRACK_STATUS_PANIC = 8,
} RatrackStatus;

typedef enum RatrackRamKind {
  RATRACK_RAM_KIND_TRAM = 0,
  RATRACK_RAM_KIND_SRAM = 1,
  RATRACK_RAM_KIND_STRAM = 2,
} RatrackRamKind;

/**
 * Opaque model handle.
 */
typedef struct RatrackModel RatrackModel;

/**
 * Opaque tracker handle. Holds its own copy of the model.
 */
typedef struct RatrackTracker RatrackTracker;

/**
 * Box as `(left, top, width, height)` in pixels.
 */
typedef struct RatrackBox {
  double x;
  double y;
  double w;
  double h;
} RatrackBox;

/**
 * Tracker settings exposed to C. Start from
 * [`ratrack_tracker_options_default`] and adjust.
 */
typedef struct RatrackTrackerOptions {
  uint32_t frame_width;
  uint32_t frame_height;
  double tau_high;
  double tau_low;
  double stage1_alpha;
  double stage1_gate;
  double stage2_alpha;
  double stage2_gate;
  double lambda;
  uint32_t max_age;
} RatrackTrackerOptions;

typedef struct RatrackDetection {
  struct RatrackBox bbox;
  double score;
} RatrackDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next call into the library on the same
 * thread.
 */
const char *ratrack_last_error(void);

/**
 * NUL-terminated library version.
 */
const char *ratrack_version(void);

double ratrack_iou(struct RatrackBox a, struct RatrackBox b);

/**
 * Intersection area over the area of `mark`.
 */
double ratrack_intersection_rate(struct RatrackBox mark, struct RatrackBox human);

/**
 * Freshly initialized model for the given seed.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage.
 */
enum RatrackStatus ratrack_model_init(enum RatrackRamKind kind,
                                      size_t model_dim,
                                      size_t heads,
                                      size_t ffn_dim,
                                      uint64_t seed,
                                      struct RatrackModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum RatrackStatus ratrack_model_load(const char *path, struct RatrackModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum RatrackStatus ratrack_model_save(const struct RatrackModel *model,
                                      const char *path,
                                      uint64_t seed);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. Null is
 * ignored.
 */
void ratrack_model_free(struct RatrackModel *model);

struct RatrackTrackerOptions ratrack_tracker_options_default(void);

/**
 * New tracker. `model` may be null for plain IoU tracking; otherwise it is
 * copied and may be freed right after this call.
 *
 * # Safety
 * `options` and `out` must be valid; `model` null or from this library.
 */
enum RatrackStatus ratrack_tracker_new(const struct RatrackModel *model,
                                       const struct RatrackTrackerOptions *options,
                                       struct RatrackTracker **out);

/**
 * Feeds one frame. Frames must increase. For each detection `i`,
 * `out_ids[i]` receives the track id it was assigned to, or 0 when it was
 * discarded.
 *
 * # Safety
 * `detections` and `out_ids` must each point to `count` elements (they may
 * be null when `count` is 0).
 */
enum RatrackStatus ratrack_tracker_step(struct RatrackTracker *tracker,
                                        size_t frame,
                                        const struct RatrackDetection *detections,
                                        size_t count,
                                        uint64_t *out_ids);

/**
 * Number of live (not yet retired) tracks, or 0 for a null handle.
 *
 * # Safety
 * `tracker` must be null or come from this library.
 */
size_t ratrack_tracker_active_count(const struct RatrackTracker *tracker);

/**
 * # Safety
 * `tracker` must come from this library and not be used afterwards. Null is
 * ignored.
 */
void ratrack_tracker_free(struct RatrackTracker *tracker);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RATRACK_H */
