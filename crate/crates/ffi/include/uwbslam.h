#ifndef UWBSLAM_H
#define UWBSLAM_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum UwbStatus {
  UWB_STATUS_OK = 0,
  UWB_STATUS_NULL_POINTER = 1,
  UWB_STATUS_INVALID_ARGUMENT = 2,
  UWB_STATUS_CONFIG = 3,
  UWB_STATUS_IO = 4,
  UWB_STATUS_ESTIMATION = 5,
  UWB_STATUS_PIPELINE = 6,
  UWB_STATUS_NO_GROUND_TRUTH = 7,
  UWB_STATUS_OUT_OF_RANGE = 8,
  UWB_STATUS_BUFFER_TOO_SMALL = 9,
  UWB_STATUS_PANIC = 10,
} UwbStatus;

// Pipeline stage selector for `uwb_run_error`.
typedef enum UwbStage {
  // Every estimated closure.
  UWB_STAGE_RAW = 0,
  // Closures kept by PCM.
  UWB_STAGE_PCM = 1,
  // Relative poses read off the optimized trajectories.
  UWB_STAGE_DPGO = 2,
  // Optimized trajectories in the anchor frame.
  UWB_STAGE_ANCHORED = 3,
} UwbStage;

// Experiment settings.
typedef struct UwbConfig UwbConfig;

// Odometry, ranging and optional ground truth of every robot.
typedef struct UwbDataset UwbDataset;

// Output of one pipeline run, with metrics when ground truth was present.
typedef struct UwbRun UwbRun;

// A timestamped planar pose.
typedef struct UwbPose {
  double t;
  double x;
  double y;
  double theta;
} UwbPose;

// Mean, RMS and max errors of one stage.
typedef struct UwbErrorStats {
  uint64_t count;
  double mean_translation;
  double rmse_translation;
  double max_translation;
  double mean_rotation_deg;
  double rmse_rotation_deg;
  double max_rotation_deg;
} UwbErrorStats;

// One window sample: each robot's pose relative to its own pose at the
// window end, and the range between them.
typedef struct UwbWindowEntry {
  double t;
  double alpha_x;
  double alpha_y;
  double alpha_theta;
  double beta_x;
  double beta_y;
  double beta_theta;
  double range;
} UwbWindowEntry;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copy the calling thread's last error message into `buf` as a
// NUL-terminated string. `written` receives the message length without the
// terminator; a too-small buffer gets a truncated message and
// `BufferTooSmall`.
//
// # Safety
// `buf` must point to `len` writable bytes; `written` may be null.
enum UwbStatus uwb_last_error(char *buf, uintptr_t len, uintptr_t *written);

// Library version as a static NUL-terminated string.
const char *uwb_version(void);

// Default settings.
struct UwbConfig *uwb_config_new(void);

// Settings from TOML text layered over the defaults.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be writable.
enum UwbStatus uwb_config_from_toml(const char *toml, struct UwbConfig **out);

// Apply one `section.key=value` override.
//
// # Safety
// `config` must be a live handle; `assignment` a NUL-terminated string.
enum UwbStatus uwb_config_set(struct UwbConfig *config, const char *assignment);

// Use `seed` for the scenario, noise, network and outlier streams.
//
// # Safety
// `config` must be a live handle.
enum UwbStatus uwb_config_set_seed(struct UwbConfig *config, uint64_t seed);

// # Safety
// `config` must be null or a handle not yet freed.
void uwb_config_free(struct UwbConfig *config);

// Synthesize a dataset from the `[scenario]` and `[noise]` settings.
//
// # Safety
// `config` must be a live handle; `out` must be writable.
enum UwbStatus uwb_dataset_generate(const struct UwbConfig *config, struct UwbDataset **out);

// Read a dataset file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum UwbStatus uwb_dataset_load(const char *path, struct UwbDataset **out);

// Write a dataset file.
//
// # Safety
// `dataset` must be a live handle; `path` a NUL-terminated string.
enum UwbStatus uwb_dataset_save(const struct UwbDataset *dataset, const char *path);

// Number of robots and ranging measurements.
//
// # Safety
// `dataset` must be a live handle; outputs may be null.
enum UwbStatus uwb_dataset_info(const struct UwbDataset *dataset,
                                uintptr_t *robots,
                                uintptr_t *rangings,
                                bool *has_truth);

// # Safety
// `dataset` must be null or a handle not yet freed.
void uwb_dataset_free(struct UwbDataset *dataset);

// Run the distributed pipeline over a dataset.
//
// # Safety
// `dataset` and `config` must be live handles; `out` must be writable.
enum UwbStatus uwb_run_pipeline(const struct UwbDataset *dataset,
                                const struct UwbConfig *config,
                                struct UwbRun **out);

// Closure counts, DPGO rounds and bytes sent.
//
// # Safety
// `run` must be a live handle; outputs may be null.
enum UwbStatus uwb_run_summary(const struct UwbRun *run,
                               uintptr_t *closures,
                               uintptr_t *inliers,
                               uintptr_t *rounds,
                               uint64_t *bytes);

// Copy robot `robot`'s optimized trajectory into `poses`. `len` receives the
// trajectory length; pass a null `poses` to query it.
//
// # Safety
// `run` must be a live handle; `poses` must hold `capacity` elements.
enum UwbStatus uwb_run_trajectory(const struct UwbRun *run,
                                  uint32_t robot,
                                  struct UwbPose *poses,
                                  uintptr_t capacity,
                                  uintptr_t *len);

// Error statistics of one stage against ground truth.
//
// # Safety
// `run` must be a live handle; `out` must be writable.
enum UwbStatus uwb_run_error(const struct UwbRun *run,
                             enum UwbStage stage,
                             struct UwbErrorStats *out);

// # Safety
// `run` must be null or a handle not yet freed.
void uwb_run_free(struct UwbRun *run);

// Estimate the pose of β in α's frame at the window end from `count`
// samples in time order, using the `[pipeline.estimator]` settings.
//
// # Safety
// `config` must be a live handle; `entries` must hold `count` elements;
// `out` must be writable.
enum UwbStatus uwb_estimate_relative_pose(const struct UwbConfig *config,
                                          const struct UwbWindowEntry *entries,
                                          uintptr_t count,
                                          struct UwbPose *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UWBSLAM_H */
