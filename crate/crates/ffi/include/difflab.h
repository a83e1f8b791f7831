#ifndef DIFFLAB_H
#define DIFFLAB_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum DlStatus {
  DL_STATUS_OK = 0,
  DL_STATUS_NULL_POINTER = 1,
  DL_STATUS_INVALID_ARGUMENT = 2,
  DL_STATUS_PRECONDITION = 3,
  DL_STATUS_NUMERICAL = 4,
  DL_STATUS_INSUFFICIENT_SAMPLE = 5,
  DL_STATUS_CONFIG = 6,
  DL_STATUS_IO = 7,
  DL_STATUS_ABORTED = 8,
  DL_STATUS_PANIC = 9,
} DlStatus;

// Opaque model handle.
typedef struct DlModel DlModel;

// Opaque handle to a sample of the scaled statistic.
typedef struct DlSample DlSample;

typedef struct DlPerturbedParams {
  double sigma_inf;
  double drift_inf;
  double sigma_amp;
  double drift_amp;
  double alpha;
  double beta;
} DlPerturbedParams;

typedef struct DlDistance {
  double value;
  double ci_low;
  double ci_high;
  // Kernel bandwidth, NaN for the Kolmogorov distance.
  double bandwidth;
  size_t n;
} DlDistance;

typedef struct DlRateFit {
  double slope;
  double intercept;
  double slope_low;
  double slope_high;
  double r2;
} DlRateFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into this library on the same thread.
const char *dl_last_error(void);

// Library version as a static nul-terminated string.
const char *dl_version(void);

// Constant coefficients `σ ≡ sigma`, `b ≡ drift`.
enum DlStatus dl_model_constant(double sigma, double drift, struct DlModel **out);

enum DlStatus dl_model_perturbed(struct DlPerturbedParams params, struct DlModel **out);

// Default perturbed-model parameters.
struct DlPerturbedParams dl_perturbed_defaults(void);

// Radial part of hyperbolic Brownian motion in dimension `d`.
enum DlStatus dl_model_hyperbolic(uint32_t d, struct DlModel **out);

// Whether the Berry-Esseen hypotheses hold for the model.
enum DlStatus dl_model_theorem_applicable(const struct DlModel *model, bool *out);

void dl_model_free(struct DlModel *model);

// Simulates `n_paths` values of the scaled statistic at `horizon`.
enum DlStatus dl_simulate_scaled(const struct DlModel *model,
                                 double horizon,
                                 size_t steps_per_unit,
                                 size_t n_paths,
                                 uint64_t seed,
                                 double x0,
                                 struct DlSample **out);

size_t dl_sample_len(const struct DlSample *sample);

// Borrowed pointer to the sample values; valid while the handle lives.
const double *dl_sample_values(const struct DlSample *sample);

void dl_sample_free(struct DlSample *sample);

// Kolmogorov distance to N(0,1) with `resamples` bootstrap draws.
enum DlStatus dl_kolmogorov_distance(const double *values,
                                     size_t n,
                                     uint64_t seed,
                                     size_t resamples,
                                     struct DlDistance *out);

// Total-variation distance to N(0,1); a non-positive `bandwidth` selects
// Silverman's rule.
enum DlStatus dl_tv_scheffe(const double *values,
                            size_t n,
                            double bandwidth,
                            uint64_t seed,
                            size_t resamples,
                            struct DlDistance *out);

// Log-log fit of `values` against `horizons`. `ci_low`/`ci_high` may both be
// null, in which case the points are weighted equally.
enum DlStatus dl_rate_fit(const double *horizons,
                          const double *values,
                          const double *ci_low,
                          const double *ci_high,
                          size_t n,
                          struct DlRateFit *out);

// Upper bound on TV(N(0, V), N(v, a²V)); `cov` is row-major `d × d`, or null
// for the identity.
enum DlStatus dl_gaussian_tv_bound(double a,
                                   const double *v,
                                   const double *cov,
                                   size_t d,
                                   double *out);

// Exact TV(N(0,1), N(v, a²)).
enum DlStatus dl_gaussian_tv_exact_1d(double a, double v, double *out);

// Runs the experiment described by a TOML document. `output_dir` overrides
// the configured directory when non-null; `passed` receives the verdict.
enum DlStatus dl_run_experiment(const char *config_toml, const char *output_dir, bool *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIFFLAB_H */
