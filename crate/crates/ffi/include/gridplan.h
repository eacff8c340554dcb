#ifndef GRIDPLAN_H
#define GRIDPLAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes for every API call.
 */
typedef enum GpStatus {
  Ok = 0,
  /**
   * A pointer argument was null.
   */
  NullPointer = 1,
  /**
   * Arguments violate a contract (bounds, occupancy, sizes).
   */
  InvalidArgument = 2,
  /**
   * Checkpoint file could not be read or parsed.
   */
  Io = 3,
  /**
   * Internal failure (panic caught at the boundary).
   */
  Internal = 4,
} GpStatus;

/**
 * Opaque handle to a loaded planner model.
 */
typedef struct GpPlanner GpPlanner;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Shortest-path distances to the goal from every cell, -1 for obstacles
 * and unreachable cells. `cells` is m*m row-major with 0 free, 1 obstacle;
 * `out_distances` must hold m*m floats.
 *
 * # Safety
 * `cells` must point to m*m readable bytes and `out_distances` to m*m
 * writable floats.
 */
enum GpStatus gp_dijkstra_field(const uint8_t *cells,
                                uintptr_t m,
                                bool toroidal,
                                uint16_t goal_row,
                                uint16_t goal_col,
                                float *out_distances);

/**
 * Shortest path length from start to goal, or -1 when unreachable.
 *
 * # Safety
 * `cells` must point to m*m readable bytes; `out_len` must be writable.
 */
enum GpStatus gp_astar(const uint8_t *cells,
                       uintptr_t m,
                       bool toroidal,
                       uint16_t start_row,
                       uint16_t start_col,
                       uint16_t goal_row,
                       uint16_t goal_col,
                       int32_t *out_len);

/**
 * Deterministic synthetic navigation maze for (seed, index); writes m*m
 * bytes (0 free, 1 obstacle).
 *
 * # Safety
 * `out_cells` must point to m*m writable bytes.
 */
enum GpStatus gp_gen_nav_map(uintptr_t m,
                             uintptr_t o_min,
                             uintptr_t o_max,
                             uint64_t seed,
                             uint64_t index,
                             uint8_t *out_cells);

/**
 * Loads a planner checkpoint (transformer or value-iteration baseline) for
 * maps of side `m`. The handle must be released with [`gp_planner_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
 */
enum GpStatus gp_planner_load(const char *path, uintptr_t m, struct GpPlanner **out);

/**
 * Releases a planner handle. Null is a no-op.
 *
 * # Safety
 * `planner` must be a pointer from [`gp_planner_load`], not yet freed.
 */
void gp_planner_free(struct GpPlanner *planner);

/**
 * Predicted action distances from a loaded planner; writes m*m floats.
 *
 * # Safety
 * `planner` must be a live handle; `cells` must point to m*m readable
 * bytes and `out_distances` to m*m writable floats.
 */
enum GpStatus gp_planner_predict(const struct GpPlanner *planner,
                                 const uint8_t *cells,
                                 bool toroidal,
                                 uint16_t goal_row,
                                 uint16_t goal_col,
                                 float *out_distances);

/**
 * Human-readable name of a status code.
 */
const char *gp_status_name(enum GpStatus status);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* GRIDPLAN_H */
