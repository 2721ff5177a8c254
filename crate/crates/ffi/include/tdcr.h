#ifndef TDCR_H
#define TDCR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Length of an actuator vector.
 */
#define TDCR_ACTUATORS 12

typedef enum TdcrSolverStatus {
  TDCR_SOLVER_STATUS_OPTIMAL = 0,
  TDCR_SOLVER_STATUS_MAX_ITER = 1,
  TDCR_SOLVER_STATUS_STALLED = 2,
  TDCR_SOLVER_STATUS_INFEASIBLE = 3,
} TdcrSolverStatus;

typedef enum TdcrStatus {
  TDCR_STATUS_OK = 0,
  TDCR_STATUS_NULL_POINTER = 1,
  TDCR_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Output buffer too small; the required size was written back.
   */
  TDCR_STATUS_BUFFER_TOO_SMALL = 3,
  TDCR_STATUS_INVALID_STATE = 4,
  TDCR_STATUS_KINEMATIC_LIMIT = 5,
  TDCR_STATUS_INVALID_CONFIG = 6,
  TDCR_STATUS_MESH_INVALID = 7,
  TDCR_STATUS_PARSE = 8,
  /**
   * The controller has no feasible solution from its current state.
   */
  TDCR_STATUS_INFEASIBLE = 9,
  TDCR_STATUS_IO = 10,
  TDCR_STATUS_PANIC = 99,
} TdcrStatus;

typedef struct TdcrConfig TdcrConfig;

typedef struct TdcrMpc TdcrMpc;

typedef struct TdcrSimulation TdcrSimulation;

typedef struct TdcrZone TdcrZone;

/**
 * Signed distance query result. Positive inside the zone.
 */
typedef struct TdcrDistance {
  double distance;
  double gradient[3];
  double closest[3];
} TdcrDistance;

/**
 * One planned step of a controller.
 */
typedef struct TdcrMpcStep {
  /**
   * First planned input (actuator velocity).
   */
  double input[TDCR_ACTUATORS];
  /**
   * Nominal state the plan starts from.
   */
  double nominal_state[TDCR_ACTUATORS];
  enum TdcrSolverStatus status;
  uint32_t iterations;
  double cost;
  /**
   * Largest constraint violation over the horizon (mm).
   */
  double max_violation;
} TdcrMpcStep;

/**
 * One closed-loop tick. Errors are NaN when no target was given.
 */
typedef struct TdcrTick {
  uint64_t tick;
  double time;
  /**
   * Applied input, feedforward plus local feedback.
   */
  double input[TDCR_ACTUATORS];
  double end_effector_measured[3];
  double end_effector_nominal[3];
  double error_measured;
  double error_nominal;
  /**
   * Smallest clearance to the margin; NaN without a zone.
   */
  double clearance_measured;
  double clearance_nominal;
  enum TdcrSolverStatus status;
  uint32_t iterations;
  double solve_seconds;
  /**
   * Non-zero when the solver faulted on this tick.
   */
  uint8_t faulted;
} TdcrTick;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next call into the library on this thread.
 */
const char *tdcr_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tdcr_version(void);

/**
 * Loads a scenario config from a TOML file. Relative mesh paths resolve
 * against the file's directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum TdcrStatus tdcr_config_load(const char *path, struct TdcrConfig **out);

/**
 * Parses a scenario config from TOML text. Pass an empty string for the
 * defaults.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` writable.
 */
enum TdcrStatus tdcr_config_from_toml(const char *toml, struct TdcrConfig **out);

/**
 * # Safety
 * `config` must come from this library or be NULL.
 */
void tdcr_config_free(struct TdcrConfig *config);

/**
 * Number of spacer disks, i.e. points in a shape.
 *
 * # Safety
 * `config` must be valid and `out` writable.
 */
enum TdcrStatus tdcr_config_disk_count(const struct TdcrConfig *config, size_t *out);

/**
 * Control period in seconds.
 *
 * # Safety
 * `config` must be valid and `out` writable.
 */
enum TdcrStatus tdcr_config_dt(const struct TdcrConfig *config, double *out);

/**
 * Initial actuator state of the scenario.
 *
 * # Safety
 * `config` must be valid and `out` must hold 12 doubles.
 */
enum TdcrStatus tdcr_config_initial_state(const struct TdcrConfig *config, double *out);

/**
 * Disk positions for an actuator state, from the base, as xyz triples.
 * `capacity` is in points; on success or BufferTooSmall `count` receives the
 * number of points.
 *
 * # Safety
 * `state` must hold 12 doubles, `points` must hold `3 * capacity` doubles
 * (may be NULL when `capacity` is 0) and `count` must be writable.
 */
enum TdcrStatus tdcr_forward_kinematics(const struct TdcrConfig *config,
                                        const double *state,
                                        double *points,
                                        size_t capacity,
                                        size_t *count);

/**
 * Loads a closed triangle mesh (OBJ) as a safe zone.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum TdcrStatus tdcr_zone_load(const char *path, struct TdcrZone **out);

/**
 * Builds a safe zone from `vertex_count` xyz triples and `triangle_count`
 * index triples, counter-clockwise seen from outside.
 *
 * # Safety
 * The arrays must hold `3 * vertex_count` doubles and `3 * triangle_count`
 * indices; `out` must be writable.
 */
enum TdcrStatus tdcr_zone_from_mesh(const double *vertices,
                                    size_t vertex_count,
                                    const uint32_t *triangles,
                                    size_t triangle_count,
                                    struct TdcrZone **out);

/**
 * # Safety
 * `zone` must come from this library or be NULL.
 */
void tdcr_zone_free(struct TdcrZone *zone);

/**
 * Signed distance from `point` to the zone boundary.
 *
 * # Safety
 * `point` must hold 3 doubles and `out` must be writable.
 */
enum TdcrStatus tdcr_zone_distance(const struct TdcrZone *zone,
                                   const double *point,
                                   struct TdcrDistance *out);

/**
 * Model predictive controller for a config. `zone` may be NULL for an
 * unconstrained controller; the handle keeps its own reference to it.
 *
 * # Safety
 * `config` must be valid, `zone` valid or NULL and `out` writable.
 */
enum TdcrStatus tdcr_mpc_new(const struct TdcrConfig *config,
                             const struct TdcrZone *zone,
                             struct TdcrMpc **out);

/**
 * # Safety
 * `mpc` must come from this library or be NULL.
 */
void tdcr_mpc_free(struct TdcrMpc *mpc);

/**
 * Solves one horizon towards `target` (NULL for none) and advances the
 * nominal state. Returns Infeasible if the nominal state violates the zone.
 *
 * # Safety
 * `mpc` must be valid, `target` NULL or 3 doubles, `out` writable.
 */
enum TdcrStatus tdcr_mpc_step(struct TdcrMpc *mpc, const double *target, struct TdcrMpcStep *out);

/**
 * Drops the warm start and returns the nominal state to the initial state.
 *
 * # Safety
 * `mpc` must be valid.
 */
enum TdcrStatus tdcr_mpc_reset(struct TdcrMpc *mpc);

/**
 * Simulated robot under the config's controller, with the config's
 * disturbances and safe zone.
 *
 * # Safety
 * `config` must be valid and `out` writable.
 */
enum TdcrStatus tdcr_sim_new(const struct TdcrConfig *config, struct TdcrSimulation **out);

/**
 * # Safety
 * `sim` must come from this library or be NULL.
 */
void tdcr_sim_free(struct TdcrSimulation *sim);

/**
 * Runs one control tick towards `target` (NULL holds position). A solver
 * fault is reported in `out.faulted` with zero input applied; the call still
 * returns Ok.
 *
 * # Safety
 * `sim` must be valid, `target` NULL or 3 doubles, `out` writable.
 */
enum TdcrStatus tdcr_sim_step(struct TdcrSimulation *sim,
                              const double *target,
                              struct TdcrTick *out);

/**
 * True plant state after the last tick.
 *
 * # Safety
 * `sim` must be valid and `out` must hold 12 doubles.
 */
enum TdcrStatus tdcr_sim_state(const struct TdcrSimulation *sim, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TDCR_H */
