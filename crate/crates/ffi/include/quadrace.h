#ifndef QUADRACE_H
#define QUADRACE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define QR_OBS_DIM 20

#define QR_ACT_DIM 4

#define QR_STATE_DIM 16

typedef enum QrStatus {
  QR_STATUS_OK = 0,
  QR_STATUS_NULL_POINTER = 1,
  QR_STATUS_INVALID_ARGUMENT = 2,
  QR_STATUS_IO = 3,
  QR_STATUS_CORRUPT_CHECKPOINT = 4,
  QR_STATUS_EPISODE_DONE = 5,
  QR_STATUS_PANIC = 6,
} QrStatus;

/**
 * Why an episode ended; `Running` while it is live.
 */
typedef enum QrDoneReason {
  QR_DONE_REASON_RUNNING = 0,
  QR_DONE_REASON_COLLISION = 1,
  QR_DONE_REASON_GATE_MISS = 2,
  QR_DONE_REASON_TIMEOUT = 3,
  QR_DONE_REASON_NUMERIC_BLOWUP = 4,
} QrDoneReason;

/**
 * Single racing environment.
 */
typedef struct QrEnv QrEnv;

/**
 * Loaded policy checkpoint.
 */
typedef struct QrPolicy QrPolicy;

/**
 * Result of one environment step.
 */
typedef struct QrStep {
  double reward;
  bool done;
  bool truncated;
  enum QrDoneReason reason;
  uint32_t gates_passed;
  uint32_t target_gate;
} QrStep;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t qr_last_error_message(char *buf, size_t len);

/**
 * Creates an environment. `params_json` and `track_json` hold JSON text;
 * null selects the 5-inch airframe and the figure-eight track.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum QrStatus qr_env_new(const char *params_json, const char *track_json, struct QrEnv **out);

/**
 * # Safety
 * `env` must be null or a handle from [`qr_env_new`] not yet freed.
 */
void qr_env_free(struct QrEnv *env);

/**
 * Starts an episode from `seed` and writes the observation.
 *
 * # Safety
 * `env` must be a live handle; `obs` must hold `QR_OBS_DIM` doubles.
 */
enum QrStatus qr_env_reset(struct QrEnv *env, uint64_t seed, double *obs);

/**
 * Applies motor commands `u` (clipped to `[0, 1]`) for one 10 ms step.
 *
 * # Safety
 * `env` must be a live handle; `u` must hold `QR_ACT_DIM` doubles, `obs`
 * `QR_OBS_DIM` writable doubles and `result` one writable [`QrStep`].
 */
enum QrStatus qr_env_step(struct QrEnv *env, const double *u, double *obs, struct QrStep *result);

/**
 * Copies the 16-element state `(p, v, euler, rates, rotor)` into `state`.
 *
 * # Safety
 * `env` must be a live handle; `state` must hold `QR_STATE_DIM` writable doubles.
 */
enum QrStatus qr_env_state(const struct QrEnv *env, double *state);

/**
 * Loads a checkpoint from its JSON manifest path.
 *
 * # Safety
 * `manifest_path` must be NUL-terminated; `out` must be writable.
 */
enum QrStatus qr_policy_load(const char *manifest_path, struct QrPolicy **out);

/**
 * # Safety
 * `policy` must be null or a handle from [`qr_policy_load`] not yet freed.
 */
void qr_policy_free(struct QrPolicy *policy);

/**
 * Deterministic motor command (clipped action mean) for `obs`.
 *
 * # Safety
 * `policy` must be a live handle; `obs` must hold `QR_OBS_DIM` doubles and
 * `u` `QR_ACT_DIM` writable doubles.
 */
enum QrStatus qr_policy_act(const struct QrPolicy *policy, const double *obs, double *u);

/**
 * Number of parameters in the loaded policy.
 *
 * # Safety
 * `policy` must be null or a live handle.
 */
size_t qr_policy_param_count(const struct QrPolicy *policy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QUADRACE_H */
