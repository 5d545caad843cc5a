#ifndef KNEEMOCO_H
#define KNEEMOCO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KmStatus {
  KM_STATUS_OK = 0,
  KM_STATUS_NULL_POINTER = 1,
  KM_STATUS_INVALID_UTF8 = 2,
  KM_STATUS_CONFIG = 3,
  KM_STATUS_STAGE = 4,
  KM_STATUS_OUT_OF_RANGE = 5,
  KM_STATUS_PANIC = 6,
} KmStatus;

typedef enum KmTrack {
  KM_TRACK_TRUTH = 0,
  KM_TRACK_PROPOSED = 1,
  KM_TRACK_MARKER = 2,
} KmTrack;

/**
 * Experiment configuration handle.
 */
typedef struct KmConfig KmConfig;

/**
 * Completed run handle.
 */
typedef struct KmRun KmRun;

/**
 * Image-quality figures for one reconstruction arm.
 */
typedef struct KmArmMetrics {
  double ssim;
  double rmse;
  double ssim_improvement_pct;
  double rmse_improvement_pct;
} KmArmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread; empty if none.
 * Valid until the next failing call on the same thread.
 */
const char *km_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *km_version(void);

/**
 * Creates a configuration with default values and no seed.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum KmStatus km_config_new(struct KmConfig **out);

/**
 * Parses a TOML configuration document.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` writable.
 */
enum KmStatus km_config_from_toml(const char *toml, struct KmConfig **out);

/**
 * Sets one key from its TOML value text, e.g. `("squat_deg", "45")`.
 * The configuration is unchanged on failure.
 *
 * # Safety
 * `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum KmStatus km_config_set(struct KmConfig *cfg, const char *key, const char *value);

/**
 * Sets the random seed.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum KmStatus km_config_set_seed(struct KmConfig *cfg, uint64_t seed);

/**
 * Sets the output directory.
 *
 * # Safety
 * `cfg` must be a live handle and `dir` a NUL-terminated string.
 */
enum KmStatus km_config_set_output(struct KmConfig *cfg, const char *dir);

/**
 * # Safety
 * `cfg` must be null or a handle not yet freed.
 */
void km_config_free(struct KmConfig *cfg);

/**
 * Runs the experiment. With `tracks_only` nonzero, only motion, IMU and
 * the two estimated tracks are produced and the run has no arms.
 *
 * # Safety
 * `cfg` must be a live handle and `out` writable.
 */
enum KmStatus km_run(const struct KmConfig *cfg, int32_t tracks_only, struct KmRun **out);

/**
 * Number of arms (uncorrected, proposed, marker); zero for a tracks-only run.
 *
 * # Safety
 * `run` must be null or a live handle.
 */
size_t km_run_arm_count(const struct KmRun *run);

/**
 * Name of arm `index`, owned by the run handle; null if out of range.
 *
 * # Safety
 * `run` must be null or a live handle.
 */
const char *km_run_arm_name(const struct KmRun *run, size_t index);

/**
 * # Safety
 * `run` must be a live handle and `out` writable.
 */
enum KmStatus km_run_arm_metrics(const struct KmRun *run, size_t index, struct KmArmMetrics *out);

/**
 * Number of views in each motion track.
 *
 * # Safety
 * `run` must be null or a live handle.
 */
size_t km_run_track_len(const struct KmRun *run);

/**
 * Motion matrix of view `index` relative to the first view: the upper
 * 3x4 block, row-major, translation in mm.
 *
 * # Safety
 * `run` must be a live handle and `out` point to 12 writable doubles.
 */
enum KmStatus km_run_track_motion(const struct KmRun *run,
                                  enum KmTrack which,
                                  size_t index,
                                  double *out);

/**
 * # Safety
 * `run` must be null or a handle not yet freed.
 */
void km_run_free(struct KmRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KNEEMOCO_H */
