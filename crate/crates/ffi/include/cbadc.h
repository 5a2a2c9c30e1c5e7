#ifndef CBADC_H
#define CBADC_H

#include <stddef.h>
#include <stdint.h>

typedef enum CbadcStatus {
  CBADC_STATUS_OK = 0,
  CBADC_STATUS_NULL_POINTER = 1,
  CBADC_STATUS_INVALID_ARGUMENT = 2,
  CBADC_STATUS_DIMENSION = 3,
  // Riccati solve, matrix inversion or eigen-decomposition failed.
  CBADC_STATUS_NUMERICAL = 4,
  // Stability conditions fail or the states ran away.
  CBADC_STATUS_UNSTABLE = 5,
  // Not enough data, or no tone to measure.
  CBADC_STATUS_INSUFFICIENT_DATA = 6,
  CBADC_STATUS_FORMAT = 7,
  CBADC_STATUS_IO = 8,
  // A Rust panic was caught at the boundary.
  CBADC_STATUS_PANIC = 9,
  CBADC_STATUS_BUFFER_TOO_SMALL = 10,
} CbadcStatus;

typedef enum CbadcInputKind {
  CBADC_INPUT_KIND_ZERO = 0,
  CBADC_INPUT_KIND_CONSTANT = 1,
  CBADC_INPUT_KIND_SINE = 2,
} CbadcInputKind;

typedef enum CbadcForm {
  CBADC_FORM_BATCH = 0,
  CBADC_FORM_MIXED = 1,
  CBADC_FORM_PARALLEL = 2,
} CbadcForm;

// Estimation-filter coefficients (opaque).
typedef struct CbadcCoefficients CbadcCoefficients;

// Input estimates (opaque).
typedef struct CbadcEstimate CbadcEstimate;

// Analog system (opaque).
typedef struct CbadcSystem CbadcSystem;

// Control trace (opaque).
typedef struct CbadcTrace CbadcTrace;

// Input signal. `value` is the constant level or the sine amplitude;
// `frequency` (Hz) and `phase` (rad) apply to sines only.
typedef struct CbadcInput {
  enum CbadcInputKind kind;
  double value;
  double frequency;
  double phase;
} CbadcInput;

typedef struct CbadcSimSummary {
  double max_abs_state;
  uint64_t bound_violations;
} CbadcSimSummary;

typedef struct CbadcToneReport {
  double snr_db;
  double sndr_db;
  double sfdr_db;
  double tone_hz;
  double tone_amp;
  double noise_power;
} CbadcToneReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cbadc_version(void);

// Length in bytes (without the terminating NUL) of the last error message.
size_t cbadc_last_error_length(void);

// Copy the last error message on this thread into `buf` (NUL-terminated,
// truncated to `len − 1` bytes). Returns the full message length.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t cbadc_last_error_message(char *buf, size_t len);

// Integrator chain with uniform stage gain `beta` and control scale `kappa`,
// read out at its last state. `feedback` holds the extra first-stage
// feedback coefficients κ_{1,2}..κ_{1,n} (`feedback_len` is 0 or n − 1).
//
// # Safety
// `feedback` must point to `feedback_len` values; `out` must be writable.
enum CbadcStatus cbadc_chain_new(size_t n,
                                 double beta,
                                 double kappa,
                                 const double *feedback,
                                 size_t feedback_len,
                                 double bound,
                                 struct CbadcSystem **out);

// Analog system from a JSON document: either a chain description
// (`{"n":…,"beta":[…],"kappa":[…]}`) or the `system` object of a
// pipeline configuration.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum CbadcStatus cbadc_system_from_json(const char *json, struct CbadcSystem **out);

// State dimension of a system, 0 for null.
//
// # Safety
// `sys` must be null or a live handle.
size_t cbadc_system_order(const struct CbadcSystem *sys);

// # Safety
// `sys` must be null or a handle not freed before.
void cbadc_system_free(struct CbadcSystem *sys);

// η² for an integrator chain with γ = Tβ at oversampling ratio `osr`.
//
// # Safety
// `out` must be writable.
enum CbadcStatus cbadc_eta2_from_osr(double gamma, double osr, size_t n, double *out);

// Design the estimation filter for estimate period `t_u`.
//
// # Safety
// `sys` must be a live handle; `out` must be writable.
enum CbadcStatus cbadc_design(const struct CbadcSystem *sys,
                              double eta2,
                              double t_u,
                              struct CbadcCoefficients **out);

// Copy the n×k matrix W, row-major, into `buf`.
//
// # Safety
// `coeffs` must be a live handle; `buf` must hold `capacity` values.
enum CbadcStatus cbadc_coefficients_w(const struct CbadcCoefficients *coeffs,
                                      double *buf,
                                      size_t capacity);

// # Safety
// `coeffs` must be null or a handle not freed before.
void cbadc_coefficients_free(struct CbadcCoefficients *coeffs);

// Simulate `periods` clock periods with a 1-bit quantizer per state.
// `summary` may be null.
//
// # Safety
// `sys` and `input` must be valid; `out` must be writable.
enum CbadcStatus cbadc_simulate(const struct CbadcSystem *sys,
                                double t,
                                const struct CbadcInput *input,
                                size_t periods,
                                uint64_t seed,
                                struct CbadcTrace **out,
                                struct CbadcSimSummary *summary);

// Trace from `len` periods of `n` control values each, row-major.
// `levels` is the quantizer level count (2 for 1-bit).
//
// # Safety
// `data` must point to `len · n` values; `out` must be writable.
enum CbadcStatus cbadc_trace_from_samples(double t,
                                          size_t n,
                                          uint32_t levels,
                                          const double *data,
                                          size_t len,
                                          struct CbadcTrace **out);

// Number of periods in a trace, 0 for null.
//
// # Safety
// `trace` must be null or a live handle.
size_t cbadc_trace_len(const struct CbadcTrace *trace);

// Copy the trace, row-major, into `buf`.
//
// # Safety
// `trace` must be a live handle; `buf` must hold `capacity` values.
enum CbadcStatus cbadc_trace_copy(const struct CbadcTrace *trace, double *buf, size_t capacity);

// # Safety
// `trace` must be null or a handle not freed before.
void cbadc_trace_free(struct CbadcTrace *trace);

// Estimate the input from a trace. `latency` is used by the mixed form only.
//
// # Safety
// `coeffs` and `trace` must be live handles; `out` must be writable.
enum CbadcStatus cbadc_estimate(const struct CbadcCoefficients *coeffs,
                                const struct CbadcTrace *trace,
                                enum CbadcForm form,
                                size_t latency,
                                struct CbadcEstimate **out);

// Number of estimate samples (all channels count as one), 0 for null.
//
// # Safety
// `est` must be null or a live handle.
size_t cbadc_estimate_len(const struct CbadcEstimate *est);

// Half-open index range of settled estimates.
//
// # Safety
// `est` must be a live handle; `start` and `end` must be writable.
enum CbadcStatus cbadc_estimate_valid_range(const struct CbadcEstimate *est,
                                            size_t *start,
                                            size_t *end);

// Copy channel `channel` of the estimate into `buf`.
//
// # Safety
// `est` must be a live handle; `buf` must hold `capacity` values.
enum CbadcStatus cbadc_estimate_channel(const struct CbadcEstimate *est,
                                        size_t channel,
                                        double *buf,
                                        size_t capacity);

// # Safety
// `est` must be null or a handle not freed before.
void cbadc_estimate_free(struct CbadcEstimate *est);

// SNR, SNDR and SFDR of the strongest tone in `[band_lo, band_hi]` Hz,
// from a Hann-windowed Welch PSD with power-of-two `segment`.
//
// # Safety
// `samples` must point to `len` values; `out` must be writable.
enum CbadcStatus cbadc_tone_report(const double *samples,
                                   size_t len,
                                   double sample_rate,
                                   size_t segment,
                                   double band_lo,
                                   double band_hi,
                                   struct CbadcToneReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CBADC_H */
