#ifndef LPVMPC_H
#define LPVMPC_H

/* Generated by cbindgen from the lpvmpc-ffi crate. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum LpvmpcStatus {
  LPVMPC_STATUS_OK = 0,
  LPVMPC_STATUS_NULL_POINTER = 1,
  LPVMPC_STATUS_INVALID_ARGUMENT = 2,
  LPVMPC_STATUS_IO = 3,
  LPVMPC_STATUS_PARSE = 4,
  LPVMPC_STATUS_NUMERICAL = 5,
  LPVMPC_STATUS_PANIC = 6,
} LpvmpcStatus;

/**
 * Opaque imitation (recurrent network) controller.
 */
typedef struct LpvmpcImitation LpvmpcImitation;

/**
 * Opaque LPV or linear prediction model.
 */
typedef struct LpvmpcModel LpvmpcModel;

/**
 * Opaque model predictive controller.
 */
typedef struct LpvmpcMpc LpvmpcMpc;

/**
 * Opaque surrogate plant.
 */
typedef struct LpvmpcPlant LpvmpcPlant;

/**
 * Surrogate engine state after one cycle.
 */
typedef struct LpvmpcState {
  double t_out;
  double p_man;
  double nox;
  double turbo_lag;
  double speed;
} LpvmpcState;

/**
 * One controller decision: inputs `[fq, soi, vgt]`, NOx slack, QP cost and
 * solver convergence flag (1 converged, 0 not).
 */
typedef struct LpvmpcAction {
  double u[3];
  double slack;
  double cost;
  int32_t converged;
} LpvmpcAction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on this thread.
 */
const char *lpvmpc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lpvmpc_version(void);

/**
 * Creates a plant. `params_json` and `bounds_json` are optional file paths
 * (null selects the built-in defaults).
 *
 * # Safety
 * Pointer arguments must be null or valid; `out` must be writable.
 */
enum LpvmpcStatus lpvmpc_plant_new(const char *params_json,
                                   const char *bounds_json,
                                   struct LpvmpcPlant **out);

/**
 * # Safety
 * `plant` must be null or a handle from [`lpvmpc_plant_new`], freed once.
 */
void lpvmpc_plant_free(struct LpvmpcPlant *plant);

/**
 * Steady state reached under a held input `u = [fq, soi, vgt]`.
 *
 * # Safety
 * `plant` must be a live handle; `u` must point to 3 doubles; `out` writable.
 */
enum LpvmpcStatus lpvmpc_plant_steady_state(const struct LpvmpcPlant *plant,
                                            const double (*u)[3],
                                            double speed,
                                            struct LpvmpcState *out);

/**
 * Advances the plant one engine cycle from `state` under input `u`.
 *
 * # Safety
 * `plant` must be a live handle; `state`, `u` valid; `out` writable.
 */
enum LpvmpcStatus lpvmpc_plant_step(const struct LpvmpcPlant *plant,
                                    const struct LpvmpcState *state,
                                    const double (*u)[3],
                                    double speed,
                                    struct LpvmpcState *out);

/**
 * Loads an LPV or linear prediction model file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable.
 */
enum LpvmpcStatus lpvmpc_model_load(const char *path, struct LpvmpcModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`lpvmpc_model_load`], freed once.
 */
void lpvmpc_model_free(struct LpvmpcModel *model);

/**
 * Creates an MPC controller on a copy of `model`. `config_json` is an
 * optional configuration file (null selects the tuned defaults); `u0` is
 * the input applied before the first step.
 *
 * # Safety
 * `model` must be a live handle; `u0` valid; `out` writable.
 */
enum LpvmpcStatus lpvmpc_mpc_new(const struct LpvmpcModel *model,
                                 const char *config_json,
                                 const double (*u0)[3],
                                 struct LpvmpcMpc **out);

/**
 * # Safety
 * `mpc` must be null or a handle from [`lpvmpc_mpc_new`], freed once.
 */
void lpvmpc_mpc_free(struct LpvmpcMpc *mpc);

/**
 * Clears controller memory; `u0` is the input applied before the next step.
 *
 * # Safety
 * `mpc` must be a live handle; `u0` valid.
 */
enum LpvmpcStatus lpvmpc_mpc_reset(struct LpvmpcMpc *mpc, const double (*u0)[3]);

/**
 * One receding-horizon decision for the measured state and torque reference.
 *
 * # Safety
 * `mpc` must be a live handle; `meas` valid; `out` writable.
 */
enum LpvmpcStatus lpvmpc_mpc_step(struct LpvmpcMpc *mpc,
                                  const struct LpvmpcState *meas,
                                  double t_ref,
                                  double speed,
                                  struct LpvmpcAction *out);

/**
 * Loads a trained imitation controller. `bounds_json` is optional (null
 * selects the default actuator limits).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `bounds_json` null or valid; `out` writable.
 */
enum LpvmpcStatus lpvmpc_imitation_load(const char *path,
                                        const char *bounds_json,
                                        struct LpvmpcImitation **out);

/**
 * # Safety
 * `ctl` must be null or a handle from [`lpvmpc_imitation_load`], freed once.
 */
void lpvmpc_imitation_free(struct LpvmpcImitation *ctl);

/**
 * Zeroes the recurrent state.
 *
 * # Safety
 * `ctl` must be a live handle.
 */
enum LpvmpcStatus lpvmpc_imitation_reset(struct LpvmpcImitation *ctl);

/**
 * One network decision for the measured state and torque reference.
 * `slack` and `cost` are zero and `converged` is 1.
 *
 * # Safety
 * `ctl` must be a live handle; `meas` valid; `out` writable.
 */
enum LpvmpcStatus lpvmpc_imitation_step(struct LpvmpcImitation *ctl,
                                        const struct LpvmpcState *meas,
                                        double t_ref,
                                        double speed,
                                        struct LpvmpcAction *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LPVMPC_H */
