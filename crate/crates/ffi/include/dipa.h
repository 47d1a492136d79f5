#ifndef DIPA_H
#define DIPA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum DipaStatus {
  DIPA_STATUS_OK = 0,
  DIPA_STATUS_NULL_POINTER = 1,
  DIPA_STATUS_INVALID_ARGUMENT = 2,
  DIPA_STATUS_IO = 3,
  DIPA_STATUS_INVALID_STATE = 4,
  DIPA_STATUS_BUFFER_TOO_SMALL = 5,
  DIPA_STATUS_PANIC = 6,
} DipaStatus;

/**
 * Simulator with its current state.
 */
typedef struct DipaEnv DipaEnv;

/**
 * A learned policy bundle loaded from disk.
 */
typedef struct DipaPolicy DipaPolicy;

/**
 * A teleoperation session driven by JSON messages.
 */
typedef struct DipaSession DipaSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread; empty after
 * a success. Valid until the next call on the same thread.
 */
const char *dipa_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void dipa_string_free(char *s);

/**
 * Creates an environment with `n_objects` objects and carry threshold
 * `'L'`, `'M'` or `'S'`, reset from `seed`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DipaStatus dipa_env_new(size_t n_objects,
                             char threshold_code,
                             uint64_t seed,
                             struct DipaEnv **out);

/**
 * # Safety
 * `env` must come from [`dipa_env_new`] and not have been freed. Null is ignored.
 */
void dipa_env_free(struct DipaEnv *env);

/**
 * # Safety
 * `env` must be a live handle.
 */
enum DipaStatus dipa_env_reset(struct DipaEnv *env, uint64_t seed);

/**
 * Length of the full-state feature vector.
 *
 * # Safety
 * `env` and `out_dim` must be valid pointers.
 */
enum DipaStatus dipa_env_feature_dim(const struct DipaEnv *env, size_t *out_dim);

/**
 * Copies the full-state features into `out` (capacity `cap`).
 *
 * # Safety
 * `out` must point to `cap` writable doubles.
 */
enum DipaStatus dipa_env_features(const struct DipaEnv *env, double *out, size_t cap);

/**
 * Applies `action` (dx, dy, dz, dtheta); it is clamped to the action
 * limits. Sets `done` when the episode has ended.
 *
 * # Safety
 * `action` must point to 4 doubles; `done` may be null.
 */
enum DipaStatus dipa_env_step(struct DipaEnv *env, const double *action, bool *done);

/**
 * Number of objects placed so far and whether all are placed.
 *
 * # Safety
 * All pointers must be valid; `moved` and `success` may be null.
 */
enum DipaStatus dipa_env_progress(const struct DipaEnv *env, size_t *moved, bool *success);

/**
 * Loads a bundle directory written by the trainer.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` a valid pointer.
 */
enum DipaStatus dipa_policy_load(const char *dir, struct DipaPolicy **out);

/**
 * # Safety
 * `policy` must come from [`dipa_policy_load`] and not have been freed. Null is ignored.
 */
void dipa_policy_free(struct DipaPolicy *policy);

/**
 * Predicts the next mode given the mode in force. Returns
 * `DIPA_STATUS_INVALID_STATE` for policies without a mode switcher.
 *
 * # Safety
 * `features` must point to `len` doubles; `out_mode` must be valid.
 */
enum DipaStatus dipa_policy_predict_mode(const struct DipaPolicy *policy,
                                         const double *features_ptr,
                                         size_t len,
                                         uint8_t current,
                                         uint8_t *out_mode);

/**
 * Action for `mode`; pass a negative `mode` for policies without modes.
 *
 * # Safety
 * `features` must point to `len` doubles; `out_action` to 4 writable doubles.
 */
enum DipaStatus dipa_policy_predict_action(const struct DipaPolicy *policy,
                                           const double *features_ptr,
                                           size_t len,
                                           int32_t mode,
                                           double *out_action);

/**
 * Runs `episodes` undisturbed test episodes and reports the success rate.
 *
 * # Safety
 * `policy` and `out_success_rate` must be valid pointers.
 */
enum DipaStatus dipa_policy_evaluate(const struct DipaPolicy *policy,
                                     char threshold_code,
                                     size_t episodes,
                                     uint64_t seed,
                                     double *out_success_rate);

/**
 * Creates a session saving episodes under `out_dir`, with disturbance
 * variances `sigma` (4 doubles) and `seed`.
 *
 * # Safety
 * `out_dir` must be a NUL-terminated string, `sigma` point to 4 doubles,
 * `out` be valid.
 */
enum DipaStatus dipa_session_new(const char *out_dir,
                                 const double *sigma,
                                 uint64_t seed,
                                 struct DipaSession **out);

/**
 * # Safety
 * `session` must come from [`dipa_session_new`] and not have been freed. Null is ignored.
 */
void dipa_session_free(struct DipaSession *session);

/**
 * Handles one client message (JSON text). `out_json` receives a JSON
 * array of the server's replies; free it with [`dipa_string_free`].
 * Malformed messages are not an error here: they produce an `error` reply.
 *
 * # Safety
 * `message` must be a NUL-terminated string; `out_json` a valid pointer.
 */
enum DipaStatus dipa_session_handle(struct DipaSession *session,
                                    const char *message,
                                    char **out_json);

/**
 * Advances the session clock by one tick. `out_json` receives a JSON
 * array of the resulting messages (empty when no episode is running).
 *
 * # Safety
 * `out_json` must be a valid pointer.
 */
enum DipaStatus dipa_session_tick(struct DipaSession *session, char **out_json);

/**
 * Saves the current episode; `out_path` receives the file path.
 *
 * # Safety
 * `out_path` must be a valid pointer.
 */
enum DipaStatus dipa_session_save(struct DipaSession *session, char **out_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIPA_H */
