#ifndef WASSERQUICK_H
#define WASSERQUICK_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum WqStatus {
  WQ_STATUS_OK = 0,
  WQ_STATUS_INVALID_INPUT = 1,
  WQ_STATUS_INFEASIBLE = 2,
  WQ_STATUS_NUMERICAL = 3,
  WQ_STATUS_USAGE = 4,
  WQ_STATUS_CALIBRATION = 5,
  WQ_STATUS_NULL_POINTER = 6,
  WQ_STATUS_PANIC = 7,
} WqStatus;

typedef enum WqMetric {
  WQ_METRIC_L1 = 0,
  WQ_METRIC_L2 = 1,
  WQ_METRIC_LINF = 2,
} WqMetric;

// An online detector fed one observation at a time.
typedef struct WqDetector WqDetector;

// A solved least favorable pair.
typedef struct WqLfd WqLfd;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failing call on this thread; empty if none. The
// pointer stays valid until the next failing call on the same thread.
const char *wq_last_error_message(void);

// Frees a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void wq_string_free(char *s);

// Solves the least favorable pair for two sample sets stored row-major
// with `dim` coordinates per observation.
//
// # Safety
// `pre` and `post` must point to `n_pre·dim` and `n_post·dim` values;
// `out` must be writable.
enum WqStatus wq_lfd_solve(const double *pre,
                           size_t n_pre,
                           const double *post,
                           size_t n_post,
                           size_t dim,
                           double r1,
                           double r2,
                           enum WqMetric metric,
                           struct WqLfd **out);

// Parses an LFD document and checks its invariants.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum WqStatus wq_lfd_from_json(const char *json, struct WqLfd **out);

// # Safety
// `lfd` must come from this library and not have been freed. Null is ignored.
void wq_lfd_free(struct WqLfd *lfd);

// Serializes an LFD; free the result with [`wq_string_free`].
//
// # Safety
// `lfd` must be a live handle; `out` must be writable.
enum WqStatus wq_lfd_to_json(const struct WqLfd *lfd, char **out);

// Number of support atoms, 0 for null.
//
// # Safety
// `lfd` must be null or a live handle.
size_t wq_lfd_support_size(const struct WqLfd *lfd);

// Coordinates per atom, 0 for null.
//
// # Safety
// `lfd` must be null or a live handle.
size_t wq_lfd_dim(const struct WqLfd *lfd);

// `KL(p2 ‖ p1)` at the solution, NaN for null.
//
// # Safety
// `lfd` must be null or a live handle.
double wq_lfd_objective(const struct WqLfd *lfd);

// Relative duality gap of the certificate, NaN for null.
//
// # Safety
// `lfd` must be null or a live handle.
double wq_lfd_gap(const struct WqLfd *lfd);

// Copies the support (row-major, `size·dim` values) into `buf`.
//
// # Safety
// `lfd` must be a live handle and `buf` must hold `len` values.
enum WqStatus wq_lfd_copy_support(const struct WqLfd *lfd, double *buf, size_t len);

// Copies `p1` (`which` = 1) or `p2` (`which` = 2) into `buf`.
//
// # Safety
// `lfd` must be a live handle and `buf` must hold `len` values.
enum WqStatus wq_lfd_copy_weights(const struct WqLfd *lfd, uint32_t which, double *buf, size_t len);

// Worst-case mean likelihood ratio over the pre-change ball and whether it
// is at most one within tolerance.
//
// # Safety
// `lfd` must be a live handle; the outputs must be writable.
enum WqStatus wq_lfd_weak_boundedness(const struct WqLfd *lfd,
                                      double *worst_case_mean_lr,
                                      bool *satisfied);

// CUSUM for a unit-variance Gaussian mean shift from 0 to `m`.
//
// # Safety
// `out` must be writable.
enum WqStatus wq_detector_cusum_gaussian(double m, double threshold, struct WqDetector **out);

// CUSUM on a one-dimensional LFD smoothed with a Gaussian kernel of
// bandwidth `h`.
//
// # Safety
// `lfd` must be a live handle; `out` must be writable.
enum WqStatus wq_detector_cusum_lfd(const struct WqLfd *lfd,
                                    double h,
                                    double threshold,
                                    struct WqDetector **out);

// Window-limited GLR for a mean shift of standardized observations.
//
// # Safety
// `out` must be writable.
enum WqStatus wq_detector_glr(size_t window, double threshold, struct WqDetector **out);

// Feeds one observation. Observing after a stop is a usage error.
//
// # Safety
// `detector` must be a live handle; `stopped` must be writable.
enum WqStatus wq_detector_observe(struct WqDetector *detector, double x, bool *stopped);

// Current statistic, NaN for null.
//
// # Safety
// `detector` must be null or a live handle.
double wq_detector_statistic(const struct WqDetector *detector);

// Observations consumed so far, 0 for null.
//
// # Safety
// `detector` must be null or a live handle.
uint64_t wq_detector_time(const struct WqDetector *detector);

// # Safety
// `detector` must come from this library and not have been freed. Null is ignored.
void wq_detector_free(struct WqDetector *detector);

// Runs a comparison from a JSON experiment configuration and returns the
// curve CSV; free it with [`wq_string_free`].
//
// # Safety
// `config_json` must be a NUL-terminated string; `out_csv` must be writable.
enum WqStatus wq_compare(const char *config_json, char **out_csv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WASSERQUICK_H */
