#ifndef FLOWPLAN_H
#define FLOWPLAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of waypoints in a trajectory; waypoint buffers hold twice this
 * many doubles, interleaved `x, y`.
 */
#define FP_WAYPOINTS 8

#define FP_TOKENS 16

typedef enum FpStatus {
  FP_STATUS_OK = 0,
  FP_STATUS_NULL_POINTER = 1,
  FP_STATUS_INVALID_ARGUMENT = 2,
  FP_STATUS_OUT_OF_RANGE = 3,
  FP_STATUS_IO = 4,
  FP_STATUS_CHECKPOINT = 5,
  FP_STATUS_RUNTIME = 6,
} FpStatus;

/**
 * Opaque codebook handle.
 */
typedef struct FpCodebook FpCodebook;

/**
 * Opaque trained policy handle.
 */
typedef struct FpPolicy FpPolicy;

/**
 * Opaque scene handle.
 */
typedef struct FpScene FpScene;

typedef struct FpReward {
  double nc;
  double dac;
  double ttc;
  double comfort;
  double ep;
  double reward;
  double pdms;
} FpReward;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t fp_last_error(char *buf, size_t len);

/**
 * # Safety
 * `out` must be null or valid for writes.
 */
enum FpStatus fp_codebook_new(double min, double max, double resolution, struct FpCodebook **out);

/**
 * # Safety
 * `cb` must be null or a handle from [`fp_codebook_new`] not yet freed.
 */
void fp_codebook_free(struct FpCodebook *cb);

/**
 * Number of tokens, or 0 for a null handle.
 *
 * # Safety
 * `cb` must be null or a live handle.
 */
size_t fp_codebook_size(const struct FpCodebook *cb);

/**
 * Nearest token to `value`. With `strict` nonzero, values outside the
 * codebook range fail with `OutOfRange` instead of clamping.
 *
 * # Safety
 * `cb` must be null or a live handle; `out` must be null or writable.
 */
enum FpStatus fp_codebook_quantize(const struct FpCodebook *cb,
                                   double value,
                                   bool strict,
                                   uint32_t *out);

/**
 * # Safety
 * `cb` must be null or a live handle; `out` must be null or writable.
 */
enum FpStatus fp_codebook_dequantize(const struct FpCodebook *cb, uint32_t id, double *out);

/**
 * Loads a `WAMFNET1` policy checkpoint from a NUL-terminated UTF-8 path.
 *
 * # Safety
 * `path` must be null or a valid C string; `out` must be null or writable.
 */
enum FpStatus fp_policy_load(const char *path, struct FpPolicy **out);

/**
 * # Safety
 * `p` must be null or a handle from [`fp_policy_load`] not yet freed.
 */
void fp_policy_free(struct FpPolicy *p);

/**
 * Samples a trajectory for command `command` (0 left, 1 straight, 2 right)
 * and ego state `ego = [x, y, heading, v, a]`. Writes `FP_TOKENS` token ids
 * to `tokens` and `2 * FP_WAYPOINTS` doubles to `waypoints`; either output
 * may be null.
 *
 * # Safety
 * `ego` must point to 5 doubles; non-null outputs must hold the sizes above.
 */
enum FpStatus fp_policy_sample(const struct FpPolicy *p,
                               uint32_t command,
                               const double *ego,
                               uint32_t steps,
                               uint64_t seed,
                               uint32_t *tokens,
                               double *waypoints);

/**
 * Deterministic generated scene; `difficulty` is 0 easy, 1 medium, 2 hard.
 *
 * # Safety
 * `out` must be null or writable.
 */
enum FpStatus fp_scene_generate(uint64_t seed, uint32_t difficulty, struct FpScene **out);

/**
 * # Safety
 * `s` must be null or a handle from [`fp_scene_generate`] not yet freed.
 */
void fp_scene_free(struct FpScene *s);

/**
 * Copies the scene's ego state `[x, y, heading, v, a]` and navigation
 * command.
 *
 * # Safety
 * `ego` must be null or hold 5 doubles; `command` must be null or writable.
 */
enum FpStatus fp_scene_ego(const struct FpScene *s, double *ego, uint32_t *command);

/**
 * Copies the expert trajectory as `2 * FP_WAYPOINTS` interleaved doubles.
 *
 * # Safety
 * `waypoints` must be null or hold `2 * FP_WAYPOINTS` doubles.
 */
enum FpStatus fp_scene_expert(const struct FpScene *s, double *waypoints);

/**
 * Rolls out and scores `2 * FP_WAYPOINTS` interleaved waypoint
 * coordinates with reward weights `(w_ep, w_ttc, w_comfort)`.
 *
 * # Safety
 * `waypoints` must hold `2 * FP_WAYPOINTS` doubles; `out` must be writable.
 */
enum FpStatus fp_scene_score(const struct FpScene *s,
                             const double *waypoints,
                             double w_ep,
                             double w_ttc,
                             double w_comfort,
                             struct FpReward *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWPLAN_H */
