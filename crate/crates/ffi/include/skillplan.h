#ifndef SKILLPLAN_H
#define SKILLPLAN_H

#include <stdint.h>
#include <stddef.h>

/**
 * Result of every call.
 */
typedef enum SkpStatus {
  SKP_STATUS_OK = 0,
  SKP_STATUS_NULL_POINTER = 1,
  SKP_STATUS_INVALID_ARGUMENT = 2,
  SKP_STATUS_CONFIG = 3,
  SKP_STATUS_INPUT = 4,
  SKP_STATUS_CONTRACT = 5,
  SKP_STATUS_FORMAT = 6,
  SKP_STATUS_TRAINING = 7,
  SKP_STATUS_IO = 8,
  SKP_STATUS_PANIC = 9,
} SkpStatus;

/**
 * One toy-world episode.
 */
typedef struct SkpEnv SkpEnv;

/**
 * Planner parameters, codebook and frozen encoders.
 */
typedef struct SkpPlanner SkpPlanner;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *skp_last_error(void);

/**
 * Library version as a static string.
 */
const char *skp_version(void);

/**
 * Number of toy-world tasks; task ids are `0..count`.
 */
uint32_t skp_task_count(void);

/**
 * Static name of task `id`, or null if out of range.
 */
const char *skp_task_name(uint32_t id);

/**
 * Freshly initialised planner. `config` is configuration text or null.
 *
 * # Safety
 * `config` must be null or a valid C string; `out` must be writable.
 */
enum SkpStatus skp_planner_new(const char *config_text,
                               uint64_t seed,
                               struct SkpPlanner **out_planner);

/**
 * Loads a checkpoint, checking it against `config` (text or null).
 *
 * # Safety
 * `path` must be a valid C string, `config` null or a valid C string, and
 * `out` writable.
 */
enum SkpStatus skp_planner_load(const char *path,
                                const char *config_text,
                                struct SkpPlanner **out_planner);

/**
 * # Safety
 * `planner` must come from this library; `path` must be a valid C string.
 */
enum SkpStatus skp_planner_save(const struct SkpPlanner *planner, const char *path);

/**
 * Releases a planner; null is ignored.
 *
 * # Safety
 * `planner` must be null or come from this library and not be used again.
 */
void skp_planner_free(struct SkpPlanner *planner);

/**
 * Scalar count of trainable parameters plus codebook entries.
 *
 * # Safety
 * `planner` must come from this library; `out_count` must be writable.
 */
enum SkpStatus skp_planner_num_parameters(const struct SkpPlanner *planner, uint64_t *out_count);

/**
 * Skill code the predictor selects for a raw observation and a
 * whitespace-separated instruction; `-1` for the flat variant.
 *
 * # Safety
 * `raw` must point at `raw_len` doubles; `instruction` must be a valid C
 * string; `out_code` must be writable.
 */
enum SkpStatus skp_planner_predict_skill(const struct SkpPlanner *planner,
                                         const double *raw,
                                         uintptr_t raw_len,
                                         const char *instruction,
                                         int32_t *out_code);

/**
 * Runs one closed-loop episode of the configured length on `env`.
 *
 * # Safety
 * Handles must come from this library; `instruction` must be a valid C
 * string; the out pointers must be writable.
 */
enum SkpStatus skp_planner_rollout(const struct SkpPlanner *planner,
                                   struct SkpEnv *env,
                                   const char *instruction,
                                   uint64_t seed,
                                   int32_t *out_success,
                                   uint64_t *out_steps);

/**
 * New episode of task `task` (see [`skp_task_name`]). `config` supplies the
 * observation width, noise and mixing seed; null selects the defaults.
 *
 * # Safety
 * `config` must be null or a valid C string; `out_env` must be writable.
 */
enum SkpStatus skp_env_new(const char *config_text,
                           uint32_t task,
                           uint64_t seed,
                           struct SkpEnv **out_env);

/**
 * Writes the current raw observation into `buf[..len]`; `len` must equal
 * the observation width.
 *
 * # Safety
 * `env` must come from this library; `buf` must hold `len` doubles.
 */
enum SkpStatus skp_env_observe(struct SkpEnv *env, double *buf, uintptr_t len);

/**
 * # Safety
 * `env` must come from this library; `action` must hold `len` doubles.
 */
enum SkpStatus skp_env_step(struct SkpEnv *env, const double *action, uintptr_t len);

/**
 * # Safety
 * `env` must come from this library; `out_success` must be writable.
 */
enum SkpStatus skp_env_succeeded(const struct SkpEnv *env, int32_t *out_success);

/**
 * Releases an environment; null is ignored.
 *
 * # Safety
 * `env` must be null or come from this library and not be used again.
 */
void skp_env_free(struct SkpEnv *env);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKILLPLAN_H */
