#ifndef JMB_H
#define JMB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum JmbInit {
  JMB_INIT_ZF_SVD = 0,
  JMB_INIT_ZF_E = 1,
  JMB_INIT_MF_SVD = 2,
  JMB_INIT_MF_E = 3,
} JmbInit;

/**
 * Result code of every fallible call.
 */
typedef enum JmbStatus {
  JMB_STATUS_OK = 0,
  JMB_STATUS_NULL_POINTER = 1,
  JMB_STATUS_INVALID_ARGUMENT = 2,
  JMB_STATUS_DIMENSION = 3,
  JMB_STATUS_NUMERICAL = 4,
  JMB_STATUS_BUFFER_TOO_SMALL = 5,
  JMB_STATUS_PANIC = 6,
} JmbStatus;

typedef enum JmbScheme {
  JMB_SCHEME_JMB_AWSMSE = 0,
  JMB_SCHEME_BC_AWSMSE = 1,
  JMB_SCHEME_JMB_ZF_SVD = 2,
  JMB_SCHEME_ZF_WF = 3,
} JmbScheme;

/**
 * A designed precoder together with a summary of how it was obtained.
 */
typedef struct JmbPrecoder JmbPrecoder;

/**
 * Channel estimate, CSIT statistics and the Monte-Carlo sample drawn around it.
 */
typedef struct JmbScenario JmbScenario;

/**
 * Settings of the alternating optimisation. Obtain defaults from
 * [`jmb_ao_options_default`].
 */
typedef struct JmbAoOptions {
  double epsilon_r;
  size_t n_max;
  double solver_tol;
  size_t solver_max_iter;
  enum JmbInit init;
} JmbAoOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version string of the library; static storage, never free it.
 */
const char *jmb_version(void);

/**
 * Description of the last failure on this thread, or null if none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *jmb_last_error(void);

struct JmbAoOptions jmb_ao_options_default(void);

/**
 * Creates a scenario from a channel estimate.
 *
 * The transmit power is `10^(snr_db/10)` with unit noise, the CSIT error
 * variance follows `P_t^-alpha` (capped at 1), and `m` conditional channel
 * realizations are drawn from `seed`.
 *
 * # Safety
 * `h_est` must point to `2 * n_t * k` doubles and `out` to writable storage.
 */
enum JmbStatus jmb_scenario_new(const double *h_est,
                                size_t n_t,
                                size_t k,
                                double alpha,
                                double snr_db,
                                size_t m,
                                uint64_t seed,
                                struct JmbScenario **out);

/**
 * # Safety
 * `s` must come from [`jmb_scenario_new`] and not be used afterwards.
 */
void jmb_scenario_free(struct JmbScenario *s);

/**
 * Transmit power budget of the scenario.
 *
 * # Safety
 * `s` must be a live scenario handle or null.
 */
double jmb_scenario_power(const struct JmbScenario *s);

/**
 * Designs a precoder for the scenario. `options` may be null for defaults;
 * it is ignored by the two closed-form schemes.
 *
 * # Safety
 * `s` must be a live scenario handle, `options` null or valid, and `out`
 * writable.
 */
enum JmbStatus jmb_optimize(const struct JmbScenario *s,
                            enum JmbScheme scheme,
                            const struct JmbAoOptions *options,
                            struct JmbPrecoder **out);

/**
 * # Safety
 * `p` must come from [`jmb_optimize`] and not be used afterwards.
 */
void jmb_precoder_free(struct JmbPrecoder *p);

/**
 * Writes the antenna count and user count of a precoder.
 *
 * # Safety
 * All pointers must be valid.
 */
enum JmbStatus jmb_precoder_dims(const struct JmbPrecoder *p, size_t *n_t, size_t *k);

/**
 * Copies the precoder (common column first) into `buf`, which must hold
 * `2 * n_t * (k + 1)` doubles; `len` is its length in doubles.
 *
 * # Safety
 * `p` must be a live handle and `buf` valid for `len` doubles.
 */
enum JmbStatus jmb_precoder_copy(const struct JmbPrecoder *p, double *buf, size_t len);

/**
 * Total transmit power `||P||_F^2`; NaN for a null handle.
 *
 * # Safety
 * `p` must be a live handle or null.
 */
double jmb_precoder_power(const struct JmbPrecoder *p);

/**
 * Power of the common column; NaN for a null handle.
 *
 * # Safety
 * `p` must be a live handle or null.
 */
double jmb_precoder_common_power(const struct JmbPrecoder *p);

/**
 * Number of AO iterations used (0 for closed-form schemes) and whether the
 * stopping rule fired before the iteration cap.
 *
 * # Safety
 * All pointers must be valid.
 */
enum JmbStatus jmb_precoder_ao_info(const struct JmbPrecoder *p,
                                    size_t *iterations,
                                    bool *converged);

/**
 * Sum rate of the precoder on a given channel (same layout as the estimate).
 *
 * # Safety
 * `h` must hold `2 * n_t * k` doubles matching the precoder, `out` writable.
 */
enum JmbStatus jmb_sum_rate(const double *h,
                            size_t n_t,
                            size_t k,
                            const struct JmbPrecoder *p,
                            double sigma_n2,
                            double *out);

/**
 * Average sum rate of the precoder over the scenario's Monte-Carlo sample.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum JmbStatus jmb_average_sum_rate(const struct JmbScenario *s,
                                    const struct JmbPrecoder *p,
                                    double *out);

/**
 * Water-filling of `budget` over `n` channel gains. `powers` receives `n`
 * values; `level` may be null.
 *
 * # Safety
 * `gains` and `powers` must be valid for `n` doubles.
 */
enum JmbStatus jmb_water_fill(const double *gains,
                              size_t n,
                              double budget,
                              double *powers,
                              double *level);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* JMB_H */
