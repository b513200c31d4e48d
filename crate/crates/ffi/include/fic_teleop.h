#ifndef FIC_TELEOP_H
#define FIC_TELEOP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FicStatus {
  FIC_STATUS_OK = 0,
  FIC_STATUS_NULL_POINTER = 1,
  FIC_STATUS_INVALID_ARGUMENT = 2,
  FIC_STATUS_INVALID_CONFIG = 3,
  /**
   * The simulation hit a non-finite state; only `fic_sim_finish` remains useful.
   */
  FIC_STATUS_ABORTED = 4,
  FIC_STATUS_IO = 5,
  FIC_STATUS_BUFFER_TOO_SMALL = 6,
  FIC_STATUS_PANIC = 7,
} FicStatus;

/**
 * Opaque FIC controller of one axis.
 */
typedef struct FicAxis FicAxis;

/**
 * Opaque simulation session.
 */
typedef struct FicSimulation FicSimulation;

/**
 * Result of one axis update.
 */
typedef struct FicAxisOutput {
  double force;
  double stiffness_force;
  double damping_force;
  /**
   * 0 while the error grows, 1 while it converges.
   */
  uint8_t phase;
  double x_max_err;
  double stored_energy;
} FicAxisOutput;

/**
 * Operator input applied from the next tick on.
 */
typedef struct FicCommand {
  double master_err[2];
  bool master_held;
  bool gripper_held;
  double external_impulse[2];
  double pose_nudge[2];
} FicCommand;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fic_version(void);

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *fic_last_error_message(void);

/**
 * Creates an axis controller from its four tuning values.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum FicStatus fic_axis_new(double w_max, double x_b, double k_0, double d, struct FicAxis **out);

/**
 * Releases an axis. NULL is ignored.
 *
 * # Safety
 * `axis` must come from `fic_axis_new` and not have been freed.
 */
void fic_axis_free(struct FicAxis *axis);

/**
 * Forgets the hysteresis memory.
 *
 * # Safety
 * `axis` must be a live handle.
 */
enum FicStatus fic_axis_reset(struct FicAxis *axis);

/**
 * One control update with error `err = x_ref - x` and its rate `vel`.
 *
 * # Safety
 * `axis` must be a live handle and `out` valid for one write.
 */
enum FicStatus fic_axis_step(struct FicAxis *axis,
                             double err,
                             double vel,
                             struct FicAxisOutput *out);

/**
 * Largest stiffness force the divergence profile can produce.
 *
 * # Safety
 * `axis` must be a live handle and `out` valid for one write.
 */
enum FicStatus fic_axis_force_bound(struct FicAxis *axis, double *out);

/**
 * Creates a simulation from a JSON configuration, or the nominal one when
 * `config_json` is NULL.
 *
 * # Safety
 * `config_json` must be NULL or a NUL-terminated string; `out` must be
 * valid for one write.
 */
enum FicStatus fic_sim_new(const char *config_json, struct FicSimulation **out);

/**
 * Releases a simulation without writing its log. NULL is ignored.
 *
 * # Safety
 * `sim` must come from `fic_sim_new` and not have been released.
 */
void fic_sim_free(struct FicSimulation *sim);

/**
 * Sets the operator input of an idle-scenario simulation.
 *
 * # Safety
 * `sim` must be a live handle and `cmd` valid for one read.
 */
enum FicStatus fic_sim_set_command(struct FicSimulation *sim, const struct FicCommand *cmd);

/**
 * Applies one delay (s) and sample rate (Hz) to all three streams.
 *
 * # Safety
 * `sim` must be a live handle.
 */
enum FicStatus fic_sim_set_channels(struct FicSimulation *sim, double delay, double sample_rate);

/**
 * Advances up to `ticks` steps, stopping early at the end of the run.
 * `finished` (optional) reports whether the run is over.
 *
 * # Safety
 * `sim` must be a live handle; `finished` must be NULL or valid for one write.
 */
enum FicStatus fic_sim_step(struct FicSimulation *sim, uint64_t ticks, bool *finished);

/**
 * Simulated time (s).
 *
 * # Safety
 * `sim` must be a live handle and `out` valid for one write.
 */
enum FicStatus fic_sim_time(struct FicSimulation *sim, double *out);

/**
 * Writes the current state as NUL-terminated JSON into `buf`. `needed`
 * receives the required size including the terminator; pass `cap = 0` to
 * query it.
 *
 * # Safety
 * `sim` must be a live handle, `buf` valid for `cap` bytes (or NULL when
 * `cap` is 0) and `needed` NULL or valid for one write.
 */
enum FicStatus fic_sim_snapshot_json(struct FicSimulation *sim,
                                     char *buf,
                                     size_t cap,
                                     size_t *needed);

/**
 * Writes the log to `path` (skipped when NULL) and releases the handle,
 * whatever the outcome. An aborted run writes its partial log and returns
 * `FIC_STATUS_ABORTED`.
 *
 * # Safety
 * `sim` must be a live handle; it is invalid after this call. `path` must be
 * NULL or a NUL-terminated string.
 */
enum FicStatus fic_sim_finish(struct FicSimulation *sim, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FIC_TELEOP_H */
