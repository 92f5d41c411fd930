/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef SPARSEPANEL_H
#define SPARSEPANEL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum SpStatus {
  SP_STATUS_OK = 0,
  SP_STATUS_NULL_POINTER = 1,
  SP_STATUS_INVALID_ARGUMENT = 2,
  // A path or string argument was not valid UTF-8.
  SP_STATUS_UTF8 = 3,
  SP_STATUS_IO = 4,
  // The computation itself failed; see the last error message.
  SP_STATUS_COMPUTE = 5,
  // A Rust panic was caught at the boundary.
  SP_STATUS_PANIC = 6,
} SpStatus;

typedef enum SpMechanism {
  SP_MECHANISM_MCAR = 0,
  SP_MECHANISM_BLOCK_BY_COUNTRY = 1,
  SP_MECHANISM_TAIL_YEARS = 2,
} SpMechanism;

typedef enum SpImputeMethod {
  SP_IMPUTE_METHOD_SOFT_IMPUTE = 0,
  SP_IMPUTE_METHOD_MEAN = 1,
  SP_IMPUTE_METHOD_INTERP = 2,
  SP_IMPUTE_METHOD_CHAINED = 3,
} SpImputeMethod;

typedef enum SpBhmMethod {
  SP_BHM_METHOD_MCMC = 0,
  SP_BHM_METHOD_VI = 1,
} SpBhmMethod;

// Opaque panel handle.
typedef struct SpPanel SpPanel;

// Opaque posterior-summary handle.
typedef struct SpPosterior SpPosterior;

// Marginal posterior summary of one parameter. `rhat` and `ess` are NaN
// when not defined (variational fits).
typedef struct SpParamSummary {
  double mean;
  double sd;
  double q05;
  double q50;
  double q95;
  double rhat;
  double ess;
} SpParamSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *sp_version(void);

// Message describing the last failed call on this thread; empty after a
// successful call. The pointer stays valid until the next call into the
// library from the same thread.
const char *sp_last_error_message(void);

// Builds a panel from a row-major `rows × cols` array; NaN marks a missing
// cell. Row `i` becomes entity `R<i+1>:GDP` and column `j` year
// `year_start + j`.
//
// # Safety
// `values` must point to `rows * cols` readable doubles and `out` must be a
// valid place to store the new handle.
enum SpStatus sp_panel_from_values(const double *values,
                                   size_t rows,
                                   size_t cols,
                                   int32_t year_start,
                                   struct SpPanel **out);

// Reads a panel from a long (`country,sector,year,value`) or wide CSV file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid place to store
// the new handle.
enum SpStatus sp_panel_read_csv(const char *path, struct SpPanel **out);

// Writes a panel as long-format CSV; missing cells are written empty.
//
// # Safety
// `panel` must be a live handle and `path` a NUL-terminated string.
enum SpStatus sp_panel_write_csv(const struct SpPanel *panel, const char *path);

// Number of entity rows; 0 for a null handle.
//
// # Safety
// `panel` must be null or a live handle.
size_t sp_panel_rows(const struct SpPanel *panel);

// Number of year columns; 0 for a null handle.
//
// # Safety
// `panel` must be null or a live handle.
size_t sp_panel_cols(const struct SpPanel *panel);

// Number of observed cells; 0 for a null handle.
//
// # Safety
// `panel` must be null or a live handle.
size_t sp_panel_observed_count(const struct SpPanel *panel);

// Copies the cells into a row-major buffer of `len == rows * cols` doubles,
// with NaN for missing cells.
//
// # Safety
// `panel` must be a live handle and `out` must point to `len` writable doubles.
enum SpStatus sp_panel_copy_values(const struct SpPanel *panel, double *out, size_t len);

// Releases a panel handle. Null is ignored.
//
// # Safety
// `panel` must be null or a handle from this library not yet freed.
void sp_panel_free(struct SpPanel *panel);

// Simulates a fully observed rank-`rank` panel with `n_countries × 4`
// sector rows over `year_start..=year_end`.
//
// # Safety
// `out` must be a valid place to store the new handle.
enum SpStatus sp_simulate_lowrank(size_t n_countries,
                                  int32_t year_start,
                                  int32_t year_end,
                                  size_t rank,
                                  double noise_sd,
                                  uint64_t seed,
                                  struct SpPanel **out);

// Simulates an outcome panel and one covariate panel from the hierarchical
// model with default effect sizes.
//
// # Safety
// `y_out` and `x_out` must be valid places to store the new handles.
enum SpStatus sp_simulate_hierarchical(size_t n_entities,
                                       size_t n_years,
                                       uint64_t seed,
                                       struct SpPanel **y_out,
                                       struct SpPanel **x_out);

// Masks a further `fraction` of the observed cells.
//
// # Safety
// `panel` must be a live handle and `out` a valid place for the new handle.
enum SpStatus sp_inject_missing(const struct SpPanel *panel,
                                enum SpMechanism mechanism,
                                double fraction,
                                uint64_t seed,
                                struct SpPanel **out);

// Completes a panel with the chosen method and default settings; `seed`
// drives the random forest of the chained method.
//
// # Safety
// `panel` must be a live handle and `out` a valid place for the new handle.
enum SpStatus sp_impute(const struct SpPanel *panel,
                        enum SpImputeMethod method,
                        uint64_t seed,
                        struct SpPanel **out);

// Fits the hierarchical model `y = β₀ + Σ βₖ xₖ + γ_entity + δ_year + ε` with
// priors scaled to the data. Covariate `k` is reported as `x<k+1>`.
//
// # Safety
// `y` must be a live handle; `covariates` must point to `n_covariates` live
// handles (or be null when `n_covariates == 0`); `out` must be a valid place
// for the new handle.
enum SpStatus sp_bhm_fit(const struct SpPanel *y,
                         const struct SpPanel *const *covariates,
                         size_t n_covariates,
                         enum SpBhmMethod method,
                         uint64_t seed,
                         struct SpPosterior **out);

// Number of summarised parameters; 0 for a null handle.
//
// # Safety
// `posterior` must be null or a live handle.
size_t sp_posterior_len(const struct SpPosterior *posterior);

// Name of parameter `index` (e.g. `beta0`, `gamma[R001:GDP]`, `sigma`), or
// null when out of range. Owned by the handle.
//
// # Safety
// `posterior` must be null or a live handle.
const char *sp_posterior_name(const struct SpPosterior *posterior, size_t index);

// Copies the summary of parameter `index` into `out`.
//
// # Safety
// `posterior` must be a live handle and `out` a writable `SpParamSummary`.
enum SpStatus sp_posterior_get(const struct SpPosterior *posterior,
                               size_t index,
                               struct SpParamSummary *out);

// Releases a posterior handle. Null is ignored.
//
// # Safety
// `posterior` must be null or a handle from this library not yet freed.
void sp_posterior_free(struct SpPosterior *posterior);

// Cross-validated LASSO on a row-major `n × p` design. Predictors are
// standardised internally and `beta_out` (length `p`) holds coefficients on
// the standardised scale; zero means the predictor was dropped. With
// `one_se` non-zero the one-standard-error λ is used instead of the
// minimum-error λ.
//
// # Safety
// `x` must point to `n * p` doubles, `y` to `n`, `beta_out` to `p` writable
// doubles, and `intercept_out`/`lambda_out` to writable doubles.
enum SpStatus sp_lasso_cv(const double *x,
                          size_t n,
                          size_t p,
                          const double *y,
                          size_t folds,
                          bool one_se,
                          uint64_t seed,
                          double *beta_out,
                          double *intercept_out,
                          double *lambda_out);

// Maximum-likelihood factor analysis of a row-major `n × p` matrix with `k`
// factors. Writes the `p × k` loadings (row-major), the `p` uniquenesses and
// the final log-likelihood.
//
// # Safety
// `y` must point to `n * p` doubles, `loadings_out` to `p * k` and
// `uniquenesses_out` to `p` writable doubles, `loglik_out` to one.
enum SpStatus sp_factor_fit(const double *y,
                            size_t n,
                            size_t p,
                            size_t k,
                            uint64_t seed,
                            double *loadings_out,
                            double *uniquenesses_out,
                            double *loglik_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPARSEPANEL_H */
