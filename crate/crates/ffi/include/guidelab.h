#ifndef GUIDELAB_H
#define GUIDELAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Reason-quality codes for [`gl_hindsight_judge`].
 */
#define GL_REASON_SUPPORTS 0

#define GL_REASON_CONTRADICTS 1

#define GL_REASON_GENERIC 2

typedef enum GlStatus {
  GL_STATUS_OK = 0,
  GL_STATUS_NULL_POINTER = 1,
  GL_STATUS_INVALID_ARGUMENT = 2,
  GL_STATUS_PARSE = 3,
  GL_STATUS_ENV = 4,
  GL_STATUS_BUFFER_TOO_SMALL = 5,
  GL_STATUS_PANIC = 6,
} GlStatus;

/**
 * Opaque environment handle.
 */
typedef struct GlEnv GlEnv;

/**
 * Opaque trajectory handle.
 */
typedef struct GlTrajectory GlTrajectory;

/**
 * Result of one environment step.
 */
typedef struct GlStepResult {
  double env_reward;
  bool done;
  bool success;
} GlStepResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or an empty string.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *gl_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void gl_string_free(char *s);

/**
 * Trust coefficient lambda(u) of the four-breakpoint schedule.
 */
enum GlStatus gl_trust_coefficient(double u,
                                   int64_t warmup_end,
                                   int64_t ramp_end,
                                   int64_t hold_end,
                                   int64_t anneal_end,
                                   double *out_lambda);

/**
 * Per-step internal reward for a polarity sign at the given magnitude.
 */
enum GlStatus gl_polarity_to_reward(int32_t polarity_sign, double magnitude, double *out_reward);

/**
 * Group-normalized advantages of `n` returns, written to `out_advantages`
 * (room for `n` values).
 *
 * # Safety
 * `returns` must point to `n` readable values and `out_advantages` to `n`
 * writable ones.
 */
enum GlStatus gl_group_advantages(const double *returns,
                                  size_t n,
                                  double adv_epsilon,
                                  double *out_advantages);

/**
 * Clipped surrogate `min(r*A, clip(r, 1-eps_low, 1+eps_high)*A)`. Equal
 * epsilons give the symmetric form.
 */
enum GlStatus gl_clipped_surrogate(double ratio,
                                   double advantage,
                                   double eps_low,
                                   double eps_high,
                                   double *out_value);

/**
 * Hindsight-judge score. A `student_sign` outside -1..=1 is an invalid
 * (unparseable) student label. `reason` is one of the `GL_REASON_*` codes.
 */
enum GlStatus gl_hindsight_judge(int32_t student_sign,
                                 int32_t oracle_sign,
                                 int32_t reason,
                                 double *out_score);

/**
 * Parses one trajectory from its JSON-line form.
 */
enum GlStatus gl_trajectory_from_json(const char *json, struct GlTrajectory **out_traj);

/**
 * # Safety
 * `t` must come from [`gl_trajectory_from_json`] and not be freed already.
 */
void gl_trajectory_free(struct GlTrajectory *t);

enum GlStatus gl_trajectory_len(const struct GlTrajectory *t, size_t *out_len);

enum GlStatus gl_trajectory_env_reward(const struct GlTrajectory *t, double *out_reward);

/**
 * Composite return at stage `u`. `config_json` is a composite-return config
 * object (`polarity_magnitude`, `schedule`, `length_normalized`); null
 * selects the defaults.
 */
enum GlStatus gl_trajectory_composite_return(const struct GlTrajectory *t,
                                             double u,
                                             const char *config_json,
                                             double *out_return);

/**
 * Serializes the trajectory as one JSON line. Free with [`gl_string_free`].
 */
enum GlStatus gl_trajectory_to_json(const struct GlTrajectory *t, char **out_json);

/**
 * Creates an environment. `spec_json` is either a bare kind name
 * (`keydoor`, `chainlab`, `noisyshop`) for the defaults or a full spec
 * object tagged with `"kind"`.
 */
enum GlStatus gl_env_new(const char *spec_json, struct GlEnv **out_env);

/**
 * # Safety
 * `env` must come from [`gl_env_new`] and not be freed already.
 */
void gl_env_free(struct GlEnv *env);

/**
 * Starts an episode. If `out_observation_json` is non-null it receives the
 * initial observation as JSON (free with [`gl_string_free`]).
 */
enum GlStatus gl_env_reset(struct GlEnv *env, uint64_t seed, char **out_observation_json);

/**
 * Applies one action. `out_observation_json` is optional as in
 * [`gl_env_reset`].
 */
enum GlStatus gl_env_step(struct GlEnv *env,
                          uint32_t action,
                          struct GlStepResult *out_result,
                          char **out_observation_json);

/**
 * Writes the admissible action ids into `buf` (capacity `cap`) and their
 * count into `out_count`. If `cap` is too small nothing is written to `buf`,
 * `out_count` holds the required size and the status is `BufferTooSmall`.
 *
 * # Safety
 * `buf` must point to `cap` writable values (it may be null when `cap` is 0).
 */
enum GlStatus gl_env_admissible(struct GlEnv *env, uint32_t *buf, size_t cap, size_t *out_count);

enum GlStatus gl_env_num_actions(struct GlEnv *env, size_t *out_n);

/**
 * Task score in [0, 1] of the current episode.
 */
enum GlStatus gl_env_score(struct GlEnv *env, double *out_score);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GUIDELAB_H */
