#ifndef NESTED_IS_H
#define NESTED_IS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Likelihood normalisation of linear-Gaussian models.
typedef enum NisConvention {
  // `g = exp(−½‖y − Tx − Bz‖²_{R⁻¹})`, `sup g = 1`.
  NIS_CONVENTION_SUP_NORMALIZED = 0,
  // `g` is the Gaussian density.
  NIS_CONVENTION_DENSITY = 1,
} NisConvention;

typedef enum NisSpectra {
  NIS_SPECTRA_BOUNDED = 0,
  NIS_SPECTRA_GROWING = 1,
} NisSpectra;

typedef enum NisStatus {
  NIS_STATUS_OK = 0,
  NIS_STATUS_NULL_POINTER = 1,
  NIS_STATUS_INVALID_ARGUMENT = 2,
  NIS_STATUS_NOT_POSITIVE_DEFINITE = 3,
  NIS_STATUS_DEGENERATE_WEIGHTS = 4,
  NIS_STATUS_UNSUPPORTED = 5,
  NIS_STATUS_NUMERICAL = 6,
  NIS_STATUS_BUFFER_TOO_SMALL = 7,
  NIS_STATUS_PANIC = 8,
} NisStatus;

// Opaque model handle.
typedef struct NisModel NisModel;

// Opaque particle-approximation handle.
typedef struct NisParticles NisParticles;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`) and returns the full message length, or 0 if none.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t nis_last_error_message(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *nis_version(void);

// Seed of replication `rep` of cell `cell` on `stream`.
uint64_t nis_derive_seed(uint64_t master, uint64_t cell, uint64_t rep, uint64_t stream);

// The scalar reference model: all parameters one, `μ_x = 0`.
//
// # Safety
// `out` must be valid for a write.
enum NisStatus nis_model_s1(struct NisModel **out);

// Linear-Gaussian model from row-major matrices:
// `mu_x[d_x]`, `sigma_x[d_x²]`, `h[d_z·d_x]`, `q[d_z²]`, `a[d_y·d_x]`,
// `b[d_y·d_z]`, `r[d_y²]`.
//
// # Safety
// Every pointer must be valid for the stated number of values; `out` for a write.
enum NisStatus nis_model_linear_gaussian(size_t d_x,
                                         size_t d_z,
                                         size_t d_y,
                                         const double *mu_x,
                                         const double *sigma_x,
                                         const double *h,
                                         const double *q,
                                         const double *a,
                                         const double *b,
                                         const double *r,
                                         enum NisConvention convention,
                                         struct NisModel **out);

// Member `d_z` of the rank-one benchmark family with default scalars.
//
// # Safety
// `out` must be valid for a write.
enum NisStatus nis_model_family(enum NisSpectra spectra,
                                size_t d_x,
                                size_t d_y,
                                size_t d_z,
                                struct NisModel **out);

// # Safety
// `model` must be null or a handle from this library, not yet freed.
void nis_model_free(struct NisModel *model);

// # Safety
// `model` must be a live handle; outputs must be valid for writes.
enum NisStatus nis_model_dims(const struct NisModel *model, size_t *d_x, size_t *d_z, size_t *d_y);

// `log π₀(l_y)` in closed form.
//
// # Safety
// `y` must hold `y_len` values; `out` must be valid for a write.
enum NisStatus nis_log_marginal_likelihood(const struct NisModel *model,
                                           const double *y,
                                           size_t y_len,
                                           double *out);

// Exact posterior of `X` given `y`: `mean[d_x]`, row-major `cov[d_x²]`.
//
// # Safety
// Buffers must be valid for the stated lengths.
enum NisStatus nis_posterior(const struct NisModel *model,
                             const double *y,
                             size_t y_len,
                             double *mean,
                             size_t mean_len,
                             double *cov,
                             size_t cov_len);

// `E‖ℓ_Y‖²` and its `d_z`-free spectral bound.
//
// # Safety
// `model` must be a live handle; outputs must be valid for writes.
enum NisStatus nis_k2(const struct NisModel *model, double *exact, double *uniform_bound);

// Runs nested importance sampling with `n` particles and `m` inner draws,
// seeded by `seed`.
//
// # Safety
// `y` must hold `y_len` values; `out` must be valid for a write.
enum NisStatus nis_sample(const struct NisModel *model,
                          const double *y,
                          size_t y_len,
                          uint64_t seed,
                          size_t n,
                          size_t m,
                          struct NisParticles **out);

// # Safety
// `particles` must be null or a handle from this library, not yet freed.
void nis_particles_free(struct NisParticles *particles);

// Number of particles and state dimension.
//
// # Safety
// `particles` must be a live handle; outputs must be valid for writes.
enum NisStatus nis_particles_shape(const struct NisParticles *particles, size_t *len, size_t *d_x);

// Particle states, particle-major (`len·d_x` values).
//
// # Safety
// `buf` must be valid for `buf_len` values.
enum NisStatus nis_particles_states(const struct NisParticles *particles,
                                    double *buf,
                                    size_t buf_len);

// Normalised weights (`len` values).
//
// # Safety
// `buf` must be valid for `buf_len` values.
enum NisStatus nis_particles_weights(const struct NisParticles *particles,
                                     double *buf,
                                     size_t buf_len);

// Log of the unbiased normalising-constant estimate and the effective
// sample size.
//
// # Safety
// `particles` must be a live handle; outputs must be valid for writes.
enum NisStatus nis_particles_summary(const struct NisParticles *particles,
                                     double *log_norm_estimate,
                                     double *ess);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NESTED_IS_H */
