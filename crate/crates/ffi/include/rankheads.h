#ifndef RANKHEADS_H
#define RANKHEADS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum RhStatus {
  RH_STATUS_OK = 0,
  RH_STATUS_INVALID_ARGUMENT = 1,
  RH_STATUS_NULL_POINTER = 2,
  RH_STATUS_SHAPE = 3,
  RH_STATUS_QUADRATURE = 4,
  RH_STATUS_DIVERGED = 5,
  RH_STATUS_NUMERIC = 6,
  RH_STATUS_PANIC = 7,
} RhStatus;

// Coefficient fields selectable by [`rh_spectral_table_get`].
typedef enum RhSpectralField {
  // Harmonic dimension `N(d, l)`.
  RH_SPECTRAL_FIELD_DIM = 0,
  // Squared norm of `P_l`.
  RH_SPECTRAL_FIELD_PNORM2 = 1,
  // Normalized coefficient of `sign`.
  RH_SPECTRAL_FIELD_ETA = 2,
  // Normalized coefficient of `arcsin`.
  RH_SPECTRAL_FIELD_ALPHA = 3,
} RhSpectralField;

// One attention head.
typedef struct RhHead RhHead;

// Ultraspherical coefficient table.
typedef struct RhSpectralTable RhSpectralTable;

// Result of a training run.
typedef struct RhTrainReport RhTrainReport;

// Monte Carlo mean with its standard error.
typedef struct RhEstimate {
  double mean;
  // Named to avoid the C `stderr` macro.
  double std_error;
  uint64_t n;
  uint64_t seed;
} RhEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a NUL-terminated string with static lifetime.
const char *rh_version(void);

// Length in bytes of the calling thread's last error message, without the NUL.
size_t rh_last_error_length(void);

// Copies the last error message into `buf` (truncated, always NUL-terminated
// when `len > 0`). Returns the number of bytes copied, excluding the NUL.
//
// # Safety
// `buf` must be valid for `len` bytes or null.
size_t rh_last_error_message(char *buf, size_t len);

// Builds the table for degrees `0..=l_max` in dimension `d >= 3`.
//
// # Safety
// `out` must be a valid pointer.
enum RhStatus rh_spectral_table_new(size_t d, size_t l_max, struct RhSpectralTable **out);

// # Safety
// `table` must come from [`rh_spectral_table_new`] and not be used afterwards.
void rh_spectral_table_free(struct RhSpectralTable *table);

// # Safety
// `table` must be a live handle, `out` a valid pointer.
enum RhStatus rh_spectral_table_get(const struct RhSpectralTable *table,
                                    size_t l,
                                    enum RhSpectralField field,
                                    double *out);

// Truncated `u(t)` over the table's odd degrees.
//
// # Safety
// `table` must be a live handle, `out` a valid pointer.
enum RhStatus rh_spectral_table_u_measure(const struct RhSpectralTable *table,
                                          double t,
                                          double *out);

// Lower bound for `h` heads of rank `r`, summed over odd degrees `<= l_max`.
//
// # Safety
// `table` must be a live handle, `out` a valid pointer.
enum RhStatus rh_lower_bound(const struct RhSpectralTable *table,
                             size_t r,
                             double h,
                             size_t l_max,
                             bool clamp_negative,
                             double *out);

// Head from row-major `d x r` matrices `K, Q, V, O`.
//
// # Safety
// Each matrix pointer must be valid for `d * r` doubles; `out` must be valid.
enum RhStatus rh_head_new(size_t d,
                          size_t r,
                          const double *k,
                          const double *q,
                          const double *v,
                          const double *o,
                          double temperature,
                          struct RhHead **out);

// Full-rank identity head selecting the nearest target.
//
// # Safety
// `out` must be a valid pointer.
enum RhStatus rh_head_full_rank_nearest(size_t d, double temperature, struct RhHead **out);

// # Safety
// `head` must come from a constructor and not be used afterwards.
void rh_head_free(struct RhHead *head);

// Attends from source `y` (length `d`) over targets `x` (row-major `d x n`)
// and writes the `d` outputs to `out`. `hardmax` selects the lowest-index
// top score instead of softmax.
//
// # Safety
// `x` must hold `d * n` doubles, `y` and `out` `d` doubles each.
enum RhStatus rh_head_attend(const struct RhHead *head,
                             const double *x,
                             size_t n,
                             const double *y,
                             bool hardmax,
                             double *out);

// Probability that `|<x1 - x2, y>| <= eps` for independent uniform unit vectors.
//
// # Safety
// `out` must be a valid pointer.
enum RhStatus rh_close_pair_probability(size_t d,
                                        double eps,
                                        size_t n,
                                        uint64_t seed,
                                        struct RhEstimate *out);

// Probability that a random rank-one head picks the nearest of `x1, x2`.
//
// # Safety
// `x1`, `x2`, `y` must each hold `d` doubles; `out` must be valid.
enum RhStatus rh_edge_probability(size_t d,
                                  const double *x1,
                                  const double *x2,
                                  const double *y,
                                  size_t n,
                                  uint64_t seed,
                                  struct RhEstimate *out);

// Squared error of the mode of `h` random rank-one voters on orthonormal pairs.
//
// # Safety
// `out` must be a valid pointer.
enum RhStatus rh_majority_accuracy(size_t d,
                                   size_t h,
                                   size_t n,
                                   uint64_t seed,
                                   struct RhEstimate *out);

// Trains from a JSON config (missing fields take defaults). A run that
// diverges still yields a report and returns `RH_STATUS_DIVERGED`.
//
// # Safety
// `config_json` must be a NUL-terminated string; `out` must be valid.
enum RhStatus rh_train_json(const char *config_json, struct RhTrainReport **out);

// Final evaluation on fresh samples; `RH_STATUS_DIVERGED` if the run diverged.
//
// # Safety
// `report` must be a live handle, `out` a valid pointer.
enum RhStatus rh_train_report_final_mse(const struct RhTrainReport *report, struct RhEstimate *out);

// Copies the report as JSON into `buf` (NUL-terminated, truncated to
// `len - 1` bytes). Returns the full JSON length so callers can size `buf`.
//
// # Safety
// `report` must be a live handle; `buf` must be valid for `len` bytes or null.
size_t rh_train_report_json(const struct RhTrainReport *report, char *buf, size_t len);

// # Safety
// `report` must come from [`rh_train_json`] and not be used afterwards.
void rh_train_report_free(struct RhTrainReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RANKHEADS_H */
