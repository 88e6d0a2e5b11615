#ifndef SPLATPOSE_H
#define SPLATPOSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum SpStatus {
  SP_STATUS_OK = 0,
  SP_STATUS_NULL_ARGUMENT = 1,
  SP_STATUS_INVALID_INPUT = 2,
  SP_STATUS_IO = 3,
  SP_STATUS_FORMAT = 4,
  SP_STATUS_CONFIG = 5,
  SP_STATUS_NUMERICAL = 6,
  SP_STATUS_PANIC = 7,
} SpStatus;

typedef struct SpConfig SpConfig;

typedef struct SpDataset SpDataset;

typedef struct SpGaussians SpGaussians;

typedef struct SpRun SpRun;

typedef struct SpTrajectory SpTrajectory;

// Pinhole intrinsics in pixels.
typedef struct SpIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
  size_t width;
  size_t height;
} SpIntrinsics;

// Relative pose error.
typedef struct SpRpe {
  // Mean per-step translation error, times 100.
  double translation;
  double rotation_deg;
} SpRpe;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *sp_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *sp_version(void);

// Builds a set from `count` rows of 14 doubles:
// centre xyz, standard deviations xyz, rotation quaternion wxyz, opacity
// logit, colour rgb.
//
// # Safety
// `params` must point to `14 * count` doubles; `out` must be writable.
enum SpStatus sp_gaussians_new(const double *params, size_t count, struct SpGaussians **out_set);

// Reads a set written by the command-line tool.
//
// # Safety
// `file` must be a NUL-terminated path; `out_set` must be writable.
enum SpStatus sp_gaussians_load(const char *file, struct SpGaussians **out_set);

// # Safety
// `set` must be a live handle; `out_count` must be writable.
enum SpStatus sp_gaussians_count(const struct SpGaussians *set, size_t *out_count);

// # Safety
// `set` must come from this library and not be used afterwards. Null is ignored.
void sp_gaussians_free(struct SpGaussians *set);

// Renders `set` from the camera-to-world `pose`, seven doubles
// `qw qx qy qz tx ty tz`.
// `color` receives `width * height * 3` interleaved values, `depth` and
// `alpha` `width * height` each; either of the last two may be null.
//
// # Safety
// Pointers must be valid for the sizes above.
enum SpStatus sp_render(const struct SpGaussians *set,
                        const double *pose,
                        const struct SpIntrinsics *intrinsics,
                        double *color,
                        double *depth,
                        double *alpha);

// PSNR in dB of two interleaved images with values in `[0, 1]`.
//
// # Safety
// `a` and `b` must hold `width * height * channels` doubles.
enum SpStatus sp_psnr(const double *a,
                      const double *b,
                      size_t width,
                      size_t height,
                      size_t channels,
                      double *out_db);

// Mean SSIM of two interleaved images.
//
// # Safety
// As for [`sp_psnr`].
enum SpStatus sp_ssim(const double *a,
                      const double *b,
                      size_t width,
                      size_t height,
                      size_t channels,
                      double *out_ssim);

// Trajectory of `count` camera-to-world poses, seven doubles each, indexed
// `0..count`.
//
// # Safety
// `poses` must hold `7 * count` doubles; `out_traj` must be writable.
enum SpStatus sp_trajectory_new(const double *poses, size_t count, struct SpTrajectory **out_traj);

// Reads a trajectory text file.
//
// # Safety
// `file` must be a NUL-terminated path; `out_traj` must be writable.
enum SpStatus sp_trajectory_load(const char *file, struct SpTrajectory **out_traj);

// # Safety
// `traj` must be a live handle; `out_len` must be writable.
enum SpStatus sp_trajectory_len(const struct SpTrajectory *traj, size_t *out_len);

// Frame index and pose (seven doubles) of entry `i`.
//
// # Safety
// `traj` must be a live handle; the outputs must be writable.
enum SpStatus sp_trajectory_get(const struct SpTrajectory *traj,
                                size_t i,
                                size_t *out_index,
                                double *out_pose);

// # Safety
// `traj` must come from this library and not be used afterwards. Null is ignored.
void sp_trajectory_free(struct SpTrajectory *traj);

// Absolute trajectory error after similarity alignment.
//
// # Safety
// Both handles must be live; `out_ate` must be writable.
enum SpStatus sp_ate(const struct SpTrajectory *est,
                     const struct SpTrajectory *gt,
                     double *out_ate);

// Relative pose error over adjacent pairs, without alignment.
//
// # Safety
// Both handles must be live; `out_rpe` must be writable.
enum SpStatus sp_rpe(const struct SpTrajectory *est,
                     const struct SpTrajectory *gt,
                     struct SpRpe *out_rpe);

// Loads a dataset directory.
//
// # Safety
// `dir` must be a NUL-terminated path; `out_ds` must be writable.
enum SpStatus sp_dataset_load(const char *dir, struct SpDataset **out_ds);

// # Safety
// `ds` must come from this library and not be used afterwards. Null is ignored.
void sp_dataset_free(struct SpDataset *ds);

// Pipeline configuration: defaults, overridden by the flat `key = value`
// text in `text` unless it is null.
//
// # Safety
// `text` must be null or NUL-terminated; `out_cfg` must be writable.
enum SpStatus sp_config_new(const char *text, struct SpConfig **out_cfg);

// # Safety
// `cfg` must come from this library and not be used afterwards. Null is ignored.
void sp_config_free(struct SpConfig *cfg);

// Runs the full pipeline over the training frames of `ds`.
//
// # Safety
// Handles must be live; `out_run` must be writable.
enum SpStatus sp_run_sequence(const struct SpDataset *ds,
                              const struct SpConfig *cfg,
                              struct SpRun **out_run);

// Copy of the estimated trajectory, to be released with [`sp_trajectory_free`].
//
// # Safety
// `run` must be live; `out_traj` must be writable.
enum SpStatus sp_run_trajectory(const struct SpRun *run, struct SpTrajectory **out_traj);

// JSON report of the run, owned by `run`.
//
// # Safety
// `run` must be live; `out_json` must be writable.
enum SpStatus sp_run_report_json(const struct SpRun *run, const char **out_json);

// # Safety
// `run` must come from this library and not be used afterwards. Null is ignored.
void sp_run_free(struct SpRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPLATPOSE_H */
