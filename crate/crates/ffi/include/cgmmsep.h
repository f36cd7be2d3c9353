#ifndef CGMMSEP_H
#define CGMMSEP_H

#include <stddef.h>
#include <stdint.h>

// Result of a call.
typedef enum CgmmStatus {
  CGMM_STATUS_OK = 0,
  CGMM_STATUS_NULL_POINTER = 1,
  CGMM_STATUS_INVALID_ARGUMENT = 2,
  CGMM_STATUS_INVALID_CONFIG = 3,
  CGMM_STATUS_DIMENSION = 4,
  CGMM_STATUS_NUMERIC = 5,
  CGMM_STATUS_IO = 6,
  CGMM_STATUS_CHECKPOINT = 7,
  CGMM_STATUS_PANIC = 8,
} CgmmStatus;

// Separated sources, DoA estimates and the EM objective trace.
typedef struct CgmmResult CgmmResult;

// A validated configuration ready to separate recordings.
typedef struct CgmmSeparator CgmmSeparator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null when the last
// call succeeded. The pointer stays valid until the next call on the thread.
const char *cgmm_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *cgmm_version(void);

// Creates a separator from TOML configuration text; null selects the
// defaults (four-microphone 8 cm circle, 72 directions, two sources).
//
// # Safety
// `config_toml` is null or a NUL-terminated string; `out` is writable.
enum CgmmStatus cgmm_separator_new(const char *config_toml, struct CgmmSeparator **out);

// # Safety
// `sep` is null or came from [`cgmm_separator_new`] and is not used again.
void cgmm_separator_free(struct CgmmSeparator *sep);

// Number of microphones the separator expects.
//
// # Safety
// `sep` is null or a live separator.
size_t cgmm_separator_n_channels(const struct CgmmSeparator *sep);

// Separates a recording given channel-major samples
// (`samples[m * n_samples + n]`). With `directional` nonzero the
// over-complete directional initialization is used, otherwise a single
// directional EM run.
//
// # Safety
// `sep` is a live separator, `samples` points to `n_channels * n_samples`
// doubles and `out` is writable.
enum CgmmStatus cgmm_separate(const struct CgmmSeparator *sep,
                              const double *samples,
                              size_t n_channels,
                              size_t n_samples,
                              uint32_t sample_rate,
                              int32_t directional,
                              struct CgmmResult **out);

// # Safety
// `res` is null or came from [`cgmm_separate`] and is not used again.
void cgmm_result_free(struct CgmmResult *res);

// # Safety
// `res` is null or a live result.
size_t cgmm_result_n_sources(const struct CgmmResult *res);

// Length in samples of every separated source.
//
// # Safety
// `res` is null or a live result.
size_t cgmm_result_n_samples(const struct CgmmResult *res);

// # Safety
// `res` is null or a live result.
size_t cgmm_result_n_iterations(const struct CgmmResult *res);

// Copies source `k` into `buf`, which holds `len` doubles;
// `len` must equal [`cgmm_result_n_samples`].
//
// # Safety
// `res` is a live result and `buf` points to `len` writable doubles.
enum CgmmStatus cgmm_result_copy_source(const struct CgmmResult *res,
                                        size_t k,
                                        double *buf,
                                        size_t len);

// Copies the per-iteration EM objective into `buf` (`len` must equal
// [`cgmm_result_n_iterations`]).
//
// # Safety
// `res` is a live result and `buf` points to `len` writable doubles.
enum CgmmStatus cgmm_result_copy_objective(const struct CgmmResult *res, double *buf, size_t len);

// Most probable azimuth of source `k`, degrees.
//
// # Safety
// `res` is a live result and `out` is writable.
enum CgmmStatus cgmm_result_doa(const struct CgmmResult *res, size_t k, double *out);

// Scale-invariant SDR in dB of `estimate` against `reference`.
//
// # Safety
// Both arrays hold `len` doubles and `out` is writable.
enum CgmmStatus cgmm_si_sdr(const double *estimate,
                            const double *reference,
                            size_t len,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CGMMSEP_H */
